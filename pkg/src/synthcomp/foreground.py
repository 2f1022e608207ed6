"""Foreground cutouts from generated pure-background object images."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from synthcomp.config import derive_seed
from synthcomp.filtering import cosine, kept_indices, select_top_foregrounds, write_filter_log
from synthcomp.gateway import BackendError, ImageHandle
from synthcomp.imaging import decode_png, dominant_border_color, encode_png, mask_bbox, pixel_digest
from synthcomp.prompts import fill_template

logger = logging.getLogger(__name__)

NEUTRAL_GRAY = 128
CROP_MARGIN = 4


class InstanceMask:
    """Binary raster with a cached popcount."""

    __slots__ = ("bits", "area")

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2 or min(bits.shape) < 1:
            raise ValueError(f"mask must be a nonempty 2-D raster, got shape {bits.shape}")
        self.bits = bits
        self.area = int(bits.sum())

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def bbox(self):
        return mask_bbox(self.bits)

    def __eq__(self, other):
        return isinstance(other, InstanceMask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"InstanceMask({self.width}x{self.height}, area={self.area})"


def iou(a, b) -> float:
    a = a.bits if isinstance(a, InstanceMask) else np.asarray(a, dtype=bool)
    b = b.bits if isinstance(b, InstanceMask) else np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


@dataclass(eq=False)
class ForegroundAsset:
    category_id: int
    rgba: np.ndarray
    mask: InstanceMask
    prompt: str = ""
    selection_score: float = 0.0
    source_area_fraction: float = 0.0
    _digest: str | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.rgba.shape[:2] != self.mask.bits.shape or self.rgba.shape[2] != 4:
            raise ValueError("rgba must be HxWx4 and match the mask")
        if not np.array_equal(self.rgba[..., 3] > 0, self.mask.bits):
            raise ValueError("alpha channel disagrees with mask")

    @classmethod
    def from_image(cls, pixels: np.ndarray, mask: InstanceMask, category_id: int, prompt="", score=0.0) -> ForegroundAsset:
        """Cut ``mask`` out of ``pixels``, cropped to the mask's tight bbox."""
        x, y, w, h = mask.bbox()
        bits = mask.bits[y : y + h, x : x + w]
        rgba = np.zeros((h, w, 4), dtype=np.uint8)
        rgba[..., :3] = np.where(bits[..., None], pixels[y : y + h, x : x + w, :3], 0)
        rgba[..., 3] = np.where(bits, 255, 0)
        return cls(category_id, rgba, InstanceMask(bits), prompt, float(score), mask.area / mask.bits.size)

    @property
    def digest(self) -> str:
        if self._digest is None:
            self._digest = pixel_digest(self.rgba)
        return self._digest

    def sidecar(self) -> dict:
        return {
            "category_id": self.category_id,
            "prompt": self.prompt,
            "score": round(self.selection_score, 6),
            "area": self.mask.area,
            "source_area_fraction": round(self.source_area_fraction, 6),
        }


class AssetStore:
    """Foreground assets grouped by category, deduplicated by content digest."""

    def __init__(self):
        self._by_category: dict[int, list[ForegroundAsset]] = {}
        self._digests: set[str] = set()

    def add(self, asset: ForegroundAsset) -> bool:
        if asset.digest in self._digests:
            return False
        self._digests.add(asset.digest)
        self._by_category.setdefault(asset.category_id, []).append(asset)
        return True

    def __len__(self) -> int:
        return len(self._digests)

    def __iter__(self):
        for cid in sorted(self._by_category):
            yield from self._by_category[cid]

    def assets(self) -> list[ForegroundAsset]:
        return list(self)

    def category(self, category_id: int) -> list[ForegroundAsset]:
        return list(self._by_category.get(category_id, ()))

    def counts(self) -> dict[int, int]:
        return {cid: len(v) for cid, v in sorted(self._by_category.items())}

    def digests(self) -> list[str]:
        return [a.digest for a in self]

    def save(self, root) -> None:
        """Write ``<root>/<category_id>/<digest>.png`` plus a JSON sidecar per asset."""
        root = Path(root)
        for asset in self:
            folder = root / str(asset.category_id)
            folder.mkdir(parents=True, exist_ok=True)
            (folder / f"{asset.digest}.png").write_bytes(encode_png(asset.rgba))
            (folder / f"{asset.digest}.json").write_text(json.dumps(asset.sidecar(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, root) -> AssetStore:
        store = cls()
        root = Path(root)
        for folder in sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: int(p.name)):
            for png in sorted(folder.glob("*.png")):
                rgba = decode_png(png.read_bytes(), "RGBA")
                meta_path = png.with_suffix(".json")
                meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
                asset = ForegroundAsset(
                    int(folder.name),
                    rgba,
                    InstanceMask(rgba[..., 3] > 0),
                    meta.get("prompt", ""),
                    meta.get("score", 0.0),
                    meta.get("source_area_fraction", 0.0),
                )
                store.add(asset)
        return store


# --------------------------------------------------------------------------
# extraction steps


def estimate_background_color(image) -> tuple[float, float, float]:
    pixels = image.pixels if isinstance(image, ImageHandle) else np.asarray(image)
    if min(pixels.shape[:2]) < 8:
        raise ValueError("background estimation needs an image of at least 8x8")
    return dominant_border_color(pixels, width=2, buckets=16)


_CLOSE = np.ones((3, 3), dtype=bool)


def segment_candidates(
    image,
    bg_color,
    threshold: float = 40.0,
    min_area_fraction: float = 0.005,
) -> list[InstanceMask]:
    """Chroma-key foreground components, largest first.

    Pixels farther than ``threshold`` (Euclidean RGB, 0-255 scale) from
    ``bg_color`` are foreground; each 4-connected component is closed with a
    3x3 element, hole-filled and kept if it covers at least
    ``min_area_fraction`` of the image.
    """
    pixels = image.pixels if isinstance(image, ImageHandle) else np.asarray(image)
    h, w = pixels.shape[:2]
    diff = pixels[..., :3].astype(np.float64) - np.asarray(bg_color, dtype=np.float64)
    fg = np.sqrt((diff**2).sum(axis=2)) > threshold
    labels, count = ndimage.label(fg)
    if count == 0:
        return []
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    min_area = min_area_fraction * h * w
    out = []
    for comp, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or sizes[comp] < min_area:
            continue
        y0, y1 = max(sl[0].start - 2, 0), min(sl[0].stop + 2, h)
        x0, x1 = max(sl[1].start - 2, 0), min(sl[1].stop + 2, w)
        local = np.pad(labels[y0:y1, x0:x1] == comp, 1)
        local = ndimage.binary_closing(local, structure=_CLOSE)
        local = ndimage.binary_fill_holes(local)[1:-1, 1:-1]
        if local.sum() < min_area:
            continue
        bits = np.zeros((h, w), dtype=bool)
        bits[y0:y1, x0:x1] = local
        out.append(InstanceMask(bits))
    out.sort(key=lambda m: -m.area)
    return out


def segment_crop(pixels: np.ndarray, mask: InstanceMask, margin: int = CROP_MARGIN) -> np.ndarray:
    """Candidate's bbox crop with non-mask pixels set to neutral gray, padded by ``margin``."""
    x, y, w, h = mask.bbox()
    bits = mask.bits[y : y + h, x : x + w]
    crop = np.where(bits[..., None], pixels[y : y + h, x : x + w, :3], NEUTRAL_GRAY).astype(np.uint8)
    return np.pad(crop, ((margin, margin), (margin, margin), (0, 0)), constant_values=NEUTRAL_GRAY)


def class_prompt(label: str, template: str = "a photo of <object>") -> str:
    return fill_template(template, {"object": label}).text


def select_segment(
    candidates: list[InstanceMask],
    image,
    label: str,
    gateway,
    area_bounds=(0.02, 0.90),
    label_template: str = "a photo of <object>",
    label_emb=None,
) -> tuple[InstanceMask, float] | None:
    """Candidate whose gray-composited crop embeds closest to the label.

    Returns None when there is no candidate or the winner's area fraction
    falls outside ``area_bounds``.
    """
    if not candidates:
        return None
    pixels = image.pixels if isinstance(image, ImageHandle) else np.asarray(image)
    if label_emb is None:
        label_emb = gateway.embed(texts=[class_prompt(label, label_template)])[0]
    crops = [segment_crop(pixels, m) for m in candidates]
    vectors = gateway.embed(images=crops)
    scores = [cosine(v, label_emb) for v in vectors]
    best = max(range(len(candidates)), key=lambda i: (scores[i], -i))
    winner = candidates[best]
    fraction = winner.area / winner.bits.size
    if not area_bounds[0] <= fraction <= area_bounds[1]:
        return None
    return winner, scores[best]


def extract_foreground(handle: ImageHandle, label: str, category_id: int, gateway, config, label_emb=None):
    """Full extraction for one generated image: ForegroundAsset or None (rejected)."""
    bg = estimate_background_color(handle)
    candidates = segment_candidates(handle, bg, config.fg_color_threshold, config.fg_min_component_fraction)
    picked = select_segment(
        candidates,
        handle,
        label,
        gateway,
        (config.fg_area_min, config.fg_area_max),
        config.class_prompt_template,
        label_emb,
    )
    if picked is None:
        return None
    mask, score = picked
    prompt = handle.prompt.text if handle.prompt is not None else ""
    return ForegroundAsset.from_image(handle.pixels, mask, category_id, prompt, score)


@dataclass
class ForegroundStats:
    generated: int = 0
    kept_by_rank: int = 0
    extracted: int = 0
    rejected: int = 0
    duplicates: int = 0

    def as_counts(self) -> dict:
        return dict(self.__dict__)


def build_foreground_assets(vocab, config, gateway, workers: int = 1, filter_log=None) -> tuple[AssetStore, ForegroundStats]:
    """Generate, rank, extract and store foregrounds for every category and template."""
    store, stats = AssetStore(), ForegroundStats()
    for category in vocab:
        label_emb = gateway.embed(texts=[class_prompt(category.label, config.class_prompt_template)])[0]
        for t, template in enumerate(config.fg_templates):
            prompt = fill_template(template, {"object": category.label}, provenance=f"fg_template:{t}")
            seed = derive_seed(config.master_seed, f"fg_gen/{category.id}/{t}")
            try:
                handles = gateway.generate_images(prompt, config.fg_images_per_template, seed)
                if not handles:
                    continue
                stats.generated += len(handles)
                decisions = select_top_foregrounds(gateway.embed(images=handles), label_emb, config.fg_keep_per_template)
                if filter_log is not None:
                    write_filter_log(filter_log, "foreground_rank", decisions, category_id=category.id, template=t)
                chosen = [handles[i] for i in kept_indices(decisions)]
                stats.kept_by_rank += len(chosen)

                def work(h, label=category.label, cid=category.id):
                    return extract_foreground(h, label, cid, gateway, config, label_emb)

                if workers > 1:
                    with ThreadPoolExecutor(max_workers=workers) as pool:
                        assets = list(pool.map(work, chosen))
                else:
                    assets = [work(h) for h in chosen]
            except BackendError as exc:
                raise BackendError(f"category {category.label!r}, template {t} ({template!r}): {exc}") from exc
            for asset in assets:
                if asset is None:
                    stats.rejected += 1
                elif store.add(asset):
                    stats.extracted += 1
                else:
                    stats.duplicates += 1
    logger.info("foregrounds: %s", stats)
    return store, stats
