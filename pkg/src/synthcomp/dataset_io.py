"""COCO-style dataset output with uncompressed column-major RLE masks."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from synthcomp.foreground import InstanceMask
from synthcomp.imaging import encode_png, load_image, mask_bbox, pixel_digest

logger = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class RleMask:
    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"size": [self.size[0], self.size[1]], "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> RleMask:
        return cls((int(d["size"][0]), int(d["size"][1])), tuple(int(c) for c in d["counts"]))


def rle_encode(mask) -> RleMask:
    bits = mask.bits if isinstance(mask, InstanceMask) else np.asarray(mask, dtype=bool)
    h, w = bits.shape
    flat = bits.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return RleMask((h, w), tuple(int(r) for r in runs))


def rle_decode(rle) -> InstanceMask:
    if isinstance(rle, dict):
        rle = RleMask.from_dict(rle)
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if np.any(counts < 0):
        raise ValueError("negative run length")
    if int(counts.sum()) != h * w:
        raise ValueError(f"run lengths sum to {int(counts.sum())}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return InstanceMask(flat.reshape((h, w), order="F"))


def coco_categories(vocab) -> list[dict]:
    return [{"id": c.id, "name": c.label} for c in vocab]


def _annotation_dict(ann_id: int, image_id: int, ann) -> dict:
    return {
        "id": ann_id,
        "image_id": image_id,
        "category_id": ann.category_id,
        "bbox": [int(v) for v in ann.bbox],
        "segmentation": rle_encode(ann.mask).to_dict(),
        "area": int(ann.area),
        "iscrowd": 0,
    }


def canonical_dump(document: dict) -> bytes:
    return (json.dumps(document, separators=(",", ":"), ensure_ascii=True) + "\n").encode()


def write_coco(samples, vocab, out_dir, manifest=None, workers: int = 1) -> object:
    """Write ``images/NNNNNN.png`` and ``annotations.json`` under ``out_dir``.

    Image ids are ``sample.index + 1``; annotation ids are dense in emission
    order. Two samples with identical pixels are a hard error.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {image_dir}: {exc}") from exc

    images, annotations, digests = [], [], []
    seen: dict[str, int] = {}

    def save(item):
        name, pixels = item
        path = out_dir / name
        try:
            path.write_bytes(encode_png(pixels))
        except OSError as exc:
            raise DatasetError(f"cannot write {path}: {exc}") from exc

    samples = iter(samples)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while batch := list(islice(samples, max(16, workers * 8))):
            jobs = []
            for sample in batch:
                image_id = sample.index + 1
                digest = pixel_digest(sample.image)
                if digest in seen:
                    raise DatasetError(f"duplicate image: sample {sample.index} repeats sample {seen[digest]}")
                seen[digest] = sample.index
                digests.append(digest)
                h, w = sample.image.shape[:2]
                name = f"images/{sample.index:06d}.png"
                images.append({"id": image_id, "file_name": name, "width": w, "height": h})
                for ann in sample.annotations:
                    annotations.append(_annotation_dict(len(annotations) + 1, image_id, ann))
                jobs.append((name, sample.image))
            if pool is None:
                for job in jobs:
                    save(job)
            else:
                list(pool.map(save, jobs))
    finally:
        if pool is not None:
            pool.shutdown()

    document = {"images": images, "annotations": annotations, "categories": coco_categories(vocab)}
    payload = canonical_dump(document)
    (out_dir / "annotations.json").write_bytes(payload)
    if manifest is not None:
        combined = hashlib.sha256(payload)
        for d in digests:
            combined.update(d.encode())
        manifest.record_stage(
            "write",
            {"images": len(images), "annotations": len(annotations), "categories": len(document["categories"])},
            combined.hexdigest(),
        )
        manifest.image_digests = digests
        manifest.save(out_dir / "manifest.json")
    return manifest


# --------------------------------------------------------------------------
# validation


@dataclass
class Violation:
    kind: str
    image_id: int | None
    annotation_id: int | None
    message: str


@dataclass
class ValidationReport:
    images: int = 0
    annotations: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def count(self, kind: str) -> int:
        return sum(v.kind == kind for v in self.violations)

    def add(self, kind, image_id, annotation_id, message):
        self.violations.append(Violation(kind, image_id, annotation_id, message))

    def summary(self) -> str:
        lines = [f"{self.images} images, {self.annotations} annotations, {len(self.violations)} violations"]
        lines += [f"  [{v.kind}] image={v.image_id} ann={v.annotation_id}: {v.message}" for v in self.violations[:50]]
        return "\n".join(lines)


def validate_dataset(path, check_files: bool = True) -> ValidationReport:
    root = Path(path)
    ann_path = root / "annotations.json" if root.is_dir() else root
    try:
        doc = json.loads(ann_path.read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable dataset {ann_path}: {exc}") from exc
    report = ValidationReport()
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            report.add("schema", None, None, f"missing or non-list {key!r}")
    if not report.ok:
        return report

    categories = {c.get("id") for c in doc["categories"]}
    images = {}
    for im in doc["images"]:
        missing = [k for k in ("id", "file_name", "width", "height") if k not in im]
        if missing:
            report.add("schema", im.get("id"), None, f"image lacks {missing}")
            continue
        if im["id"] in images:
            report.add("duplicate_id", im["id"], None, "duplicate image id")
        images[im["id"]] = im
        if check_files and root.is_dir() and not (root / im["file_name"]).exists():
            report.add("missing_file", im["id"], None, f"{im['file_name']} not found")
    report.images = len(images)

    ann_ids = set()
    for ann in doc["annotations"]:
        report.annotations += 1
        aid, iid = ann.get("id"), ann.get("image_id")
        missing = [k for k in ("id", "image_id", "category_id", "bbox", "segmentation", "area", "iscrowd") if k not in ann]
        if missing:
            report.add("schema", iid, aid, f"annotation lacks {missing}")
            continue
        if aid in ann_ids:
            report.add("duplicate_id", iid, aid, "duplicate annotation id")
        ann_ids.add(aid)
        if iid not in images:
            report.add("resolution", iid, aid, f"image_id {iid} does not exist")
            continue
        if ann["category_id"] not in categories:
            report.add("resolution", iid, aid, f"category_id {ann['category_id']} does not exist")
        im = images[iid]
        W, H = im["width"], im["height"]
        x, y, w, h = ann["bbox"]
        if x < 0 or y < 0 or w < 1 or h < 1 or x + w > W or y + h > H:
            report.add("bbox_bounds", iid, aid, f"bbox {ann['bbox']} outside {W}x{H}")
        try:
            mask = rle_decode(ann["segmentation"])
        except (ValueError, KeyError, TypeError) as exc:
            report.add("segmentation", iid, aid, str(exc))
            continue
        if (mask.height, mask.width) != (H, W):
            report.add("segmentation", iid, aid, f"mask size {mask.width}x{mask.height} != image {W}x{H}")
        tight = mask_bbox(mask.bits)
        if tight is None or list(tight) != list(ann["bbox"]):
            report.add("bbox_tightness", iid, aid, f"bbox {ann['bbox']} != tight bound {tight}")
        if mask.area != ann["area"]:
            report.add("area", iid, aid, f"area {ann['area']} != mask popcount {mask.area}")
    return report


# --------------------------------------------------------------------------
# contact sheet


def _tile(sample) -> tuple[np.ndarray, list]:
    if hasattr(sample, "image"):
        return sample.image, [a.bbox for a in sample.annotations]
    image, boxes = sample
    return image, list(boxes)


def contact_sheet(samples, grid=(2, 2), out_path="contact_sheet.png", outline=(255, 0, 0)) -> Path:
    """Montage of the first ``rows * cols`` samples with bbox outlines drawn."""
    rows, cols = grid
    samples = list(samples)
    if not samples:
        raise ValueError("contact sheet needs at least one sample")
    if len(samples) > rows * cols:
        logger.warning("contact sheet: %d samples for a %dx%d grid, using the first %d", len(samples), rows, cols, rows * cols)
        samples = samples[: rows * cols]
    first, _ = _tile(samples[0])
    th, tw = first.shape[:2]
    sheet = Image.new("RGB", (cols * tw, rows * th), (0, 0, 0))
    draw = ImageDraw.Draw(sheet)
    for k, sample in enumerate(samples):
        image, boxes = _tile(sample)
        r, c = divmod(k, cols)
        ox, oy = c * tw, r * th
        sheet.paste(Image.fromarray(image[:th, :tw]), (ox, oy))
        for x, y, w, h in boxes:
            draw.rectangle([ox + x, oy + y, ox + x + w - 1, oy + y + h - 1], outline=outline)
    out_path = Path(out_path)
    sheet.save(out_path)
    return out_path


def contact_sheet_from_dataset(path, n: int = 16, grid=(4, 4), out_path=None) -> Path:
    root = Path(path)
    doc = json.loads((root / "annotations.json").read_text())
    boxes: dict[int, list] = {}
    for ann in doc["annotations"]:
        boxes.setdefault(ann["image_id"], []).append(ann["bbox"])
    tiles = [(load_image(root / im["file_name"]), boxes.get(im["id"], [])) for im in doc["images"][:n]]
    return contact_sheet(tiles, grid, out_path or root / "contact_sheet.png")
