"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""

import json
import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from oracles import filter_oracle, top_oracle
from synthcomp.backgrounds import build_context_backgrounds, build_zero_shot_backgrounds
from synthcomp.cli import main
from synthcomp.compositor import build_dataset, scheduled_assets
from synthcomp.config import ClassVocabulary, PipelineConfig, RunManifest
from synthcomp.dataset_io import RleMask, rle_decode, rle_encode, write_coco
from synthcomp.filtering import filter_backgrounds, kept_indices, select_top_foregrounds
from synthcomp.foreground import ForegroundAsset, InstanceMask, build_foreground_assets, extract_foreground, iou
from synthcomp.gateway import Gateway, ImageHandle, StubBackend, image_seed
from synthcomp.prompts import Caption, Intervention, Lexicon, intervene

RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- shared 1000-sample stub dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    config = PipelineConfig(
        zero_shot_templates=4,
        images_per_zero_shot_template=25,
        fg_templates=("A photo of <object>", "<object> isolated on white background"),
        fg_images_per_template=6,
        fg_keep_per_template=5,
        target_dataset_size=1000,
        image_size=(96, 96),
        master_seed=31,
    )
    vocab = ClassVocabulary.from_labels(["dog", "cat", "bus", "bottle"])
    gateway = Gateway.stub(config)
    fg, _ = build_foreground_assets(vocab, config, gateway)
    bg, _ = build_zero_shot_backgrounds(vocab, config, gateway)
    out = tmp_path_factory.mktemp("ac_dataset")
    started = time.perf_counter()
    samples = []

    def keep(stream):
        for s in stream:
            samples.append(s)
            yield s

    write_coco(keep(build_dataset(fg, bg, config, workers=4)), vocab, out, workers=4)
    elapsed = time.perf_counter() - started
    return {"config": config, "fg": fg, "bg": bg, "out": out, "samples": samples, "elapsed": elapsed}


def _oracle_decode(seg):
    # independent column-major run expansion
    h, w = seg["size"]
    flat = []
    value = 0
    for run in seg["counts"]:
        flat.extend([value] * run)
        value ^= 1
    return np.array(flat, dtype=bool).reshape((w, h)).T


def _oracle_bbox(bits):
    ys, xs = np.nonzero(bits)
    return [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]


# 1


def test_criterion_01_count_fidelity():
    started = time.perf_counter()
    config = PipelineConfig(num_cdis_per_class=1, captions_per_cdi=2, images_per_caption=80, keep_per_caption=30, image_size=(64, 64))
    vocab = ClassVocabulary.from_labels(["dog"])
    gateway = Gateway.stub(config)
    cdi = np.full((64, 64, 3), (40, 160, 40), np.uint8)
    cdi[20:44, 20:44] = (120, 80, 40)

    import io

    log = io.StringIO()
    backgrounds, stats = build_context_backgrounds([("cdi0", cdi)], vocab, Lexicon.load(), config, gateway, filter_log=log)
    rows = [json.loads(line) for line in log.getvalue().splitlines()]
    per_caption = {}
    for r in rows:
        per_caption.setdefault(r["caption"], 0)
        per_caption[r["caption"]] += r["kept"]

    zs, zs_stats = build_zero_shot_backgrounds(vocab, PipelineConfig(image_size=(64, 64)), gateway)
    elapsed = time.perf_counter() - started
    ok = (
        stats.generated == 160
        and len(rows) == 160
        and sorted(per_caption.values()) == [30, 30]
        and zs_stats.generated == 9600
        and len(zs) == 9120
        and elapsed < 30
    )
    report(1, "count fidelity", ok, f"generated={stats.generated} kept/caption={sorted(per_caption.values())} zero-shot={len(zs)} t={elapsed:.1f}s")


# 2


def test_criterion_02_annotation_correctness(dataset):
    started = time.perf_counter()
    doc = json.loads((dataset["out"] / "annotations.json").read_text())
    bad = 0
    for ann in doc["annotations"]:
        bits = _oracle_decode(ann["segmentation"])
        if not bits.any() or ann["bbox"] != _oracle_bbox(bits) or ann["area"] != int(np.count_nonzero(bits)):
            bad += 1
    elapsed = dataset["elapsed"] + time.perf_counter() - started
    ok = len(doc["images"]) == 1000 and bad == 0 and len(doc["annotations"]) > 0 and elapsed < 120
    report(2, "annotation correctness", ok, f"{len(doc['annotations'])} annotations, {bad} wrong, t={elapsed:.1f}s")


# 3


def test_criterion_03_occlusion_disjointness(dataset):
    overlaps = 0
    for sample in dataset["samples"]:
        masks = [a.mask.bits for a in sample.annotations]
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                overlaps += bool(np.any(masks[i] & masks[j]))
    report(3, "occlusion disjointness", overlaps == 0 and len(dataset["samples"]) == 1000, f"{overlaps} overlapping pairs")


# 4


def _locality_violations(sample, background, sigma):
    """Check every pixel the band rule decides: topmost paste whose reach covers it, or background."""
    radius = int(np.ceil(3 * sigma))
    H, W = background.shape[:2]
    expected = background.astype(np.int64).copy()
    decided = np.ones((H, W), dtype=bool)
    owner_found = np.zeros((H, W), dtype=bool)
    for mask, color in reversed(list(zip(sample.pasted_masks, sample.pasted_colors))):
        if sigma == 0:
            reach, interior = mask, mask
        else:
            reach = ndimage.distance_transform_cdt(~mask, metric="chessboard") <= radius
            interior = ndimage.distance_transform_cdt(mask, metric="chessboard") > radius
        fresh = reach & ~owner_found
        expected[fresh & interior] = color[fresh & interior]
        decided[fresh & ~interior] = False
        owner_found |= reach
    return int(np.count_nonzero(np.any(sample.image[decided] != expected[decided], axis=-1))), int(decided.sum())


def test_criterion_04_blend_locality(dataset):
    lookup = {b.digest: b.pixels for b in dataset["bg"]}
    totals = {}
    for sigma in (2.0, 0.0):
        config = dataset["config"].with_overrides(blur_sigma=sigma)
        bad = checked = 0
        for sample in build_dataset(dataset["fg"], dataset["bg"], config, stop=100):
            b, c = _locality_violations(sample, lookup[sample.background_id], sigma)
            bad += b
            checked += c
        totals[sigma] = (bad, checked)
    ok = all(bad == 0 and checked > 0 for bad, checked in totals.values())
    report(4, "blend locality", ok, "; ".join(f"sigma={s}: {b} of {c} pixels differ" for s, (b, c) in totals.items()))


# 5


def _random_case(rng):
    n = int(rng.integers(1, 201))
    d = int(rng.integers(2, 9))
    # dyadic entries keep every dot product exact; duplicated rows force ties
    base = rng.integers(-4, 5, size=(max(1, n // 3), d)) / 8
    cands = base[rng.integers(0, len(base), n)]
    caption = rng.integers(-4, 5, size=d) / 8
    classes = rng.integers(-4, 5, size=(int(rng.integers(0, 4)), d)) / 8
    keep = int(rng.integers(1, n + 3))
    threshold = float(rng.integers(-8, 9)) / 16
    return cands, caption, classes, keep, threshold


def test_criterion_05_filter_oracle():
    rng = np.random.default_rng(5)
    mismatches = ties = 0
    for _ in range(1000):
        cands, caption, classes, keep, thr = _random_case(rng)
        ties += len(np.unique(cands @ caption)) < len(cands)
        got = kept_indices(filter_backgrounds(cands, caption, classes, keep, thr))
        mismatches += got != filter_oracle(cands, caption, classes, keep, thr)
        mismatches += kept_indices(select_top_foregrounds(cands, caption, keep)) != top_oracle(cands, caption, keep)
    report(5, "filter oracle equivalence", mismatches == 0 and ties > 0, f"1000 sets, {ties} with ties, {mismatches} mismatches")


# 6


def test_criterion_06_rle_round_trip():
    rng = np.random.default_rng(6)
    failures = 0
    for k in range(10_000):
        h, w = (int(v) for v in rng.integers(1, 129, 2))
        if k % 3 == 0:
            m = rng.random((h, w)) < rng.random()
        elif k % 3 == 1:
            m = ndimage.binary_dilation(rng.random((h, w)) < 0.01, iterations=int(rng.integers(1, 6)))
        else:
            m = np.full((h, w), bool(k % 2))
        failures += not np.array_equal(rle_decode(rle_encode(m)).bits, m)
    center = np.zeros((3, 3), bool)
    center[1, 1] = True
    fixtures = [
        (np.zeros((2, 2), bool), (4,)),
        (np.ones((2, 2), bool), (0, 4)),
        (center, (4, 1, 4)),
    ]
    for mask, counts in fixtures:
        failures += rle_encode(mask).counts != counts
        failures += not np.array_equal(rle_decode(RleMask(mask.shape, counts)).bits, mask)
    report(6, "RLE round trip", failures == 0, f"10000 random masks + 3 fixtures, {failures} failures")


# 7

DETERMINISM_CONFIG = """\
zero_shot_templates = 4
images_per_zero_shot_template = 25
fg_images_per_template = 8
fg_keep_per_template = 6
target_dataset_size = 200
image_size = 256x256
master_seed = 2024
"""


def test_criterion_07_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(DETERMINISM_CONFIG)
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("dog\ncat\nbus\nperson\n")
    times, codes = [], []
    for workers in (1, 4):
        started = time.perf_counter()
        codes.append(
            main(["run-all", "--stub", "--zero-shot", "--config", str(cfg), "--vocab", str(vocab), "--workers", str(workers), "--out", str(tmp_path / f"w{workers}")])
        )
        times.append(time.perf_counter() - started)
    a, b = (tmp_path / "w1"), (tmp_path / "w4")
    same_json = (a / "annotations.json").read_bytes() == (b / "annotations.json").read_bytes()
    digests = [RunManifest.load(p / "manifest.json").image_digests for p in (a, b)]
    n_images = len(json.loads((a / "annotations.json").read_text())["images"])
    ok = codes == [0, 0] and same_json and digests[0] == digests[1] and n_images == 200 and max(times) < 60
    report(7, "determinism across worker counts", ok, f"exit={codes} identical_json={same_json} t={times[0]:.1f}s/{times[1]:.1f}s")


# 8


def test_criterion_08_extraction_quality():
    stub = StubBackend()
    gateway = Gateway(stub, (128, 128))
    config = PipelineConfig()
    labels = ["dog", "cat", "bus", "bottle", "chair", "horse", "sheep", "train"]
    templates = [
        "A photo of <object>",
        "a photo of <object> in pure background",
        "<object> in a white background",
        "<object> without background",
        "<object> isolated on white background",
    ]
    scores = []
    for k in range(200):
        label = labels[k % len(labels)]
        size = (64, 128, 256)[k % 3]
        prompt = templates[k % len(templates)].replace("<object>", label)
        rgb, truth = stub.render(prompt, image_seed(8, k), size, size)
        handle = ImageHandle(rgb, Caption(prompt), image_seed(8, k), stub.backend_id)
        asset = extract_foreground(handle, label, 1, gateway, config)
        if asset is None:
            scores.append(0.0)
            continue
        # put the cropped mask back at its source position for the IoU
        cands = np.zeros_like(truth)
        ax, ay = _locate(rgb, asset)
        cands[ay : ay + asset.mask.height, ax : ax + asset.mask.width] = asset.mask.bits
        scores.append(iou(cands, truth))
    good = sum(s >= 0.95 for s in scores)
    report(8, "foreground extraction IoU", good >= 190, f"{good}/200 fixtures with IoU >= 0.95, min={min(scores):.3f}")


def _locate(rgb, asset: ForegroundAsset):
    """Top-left of the asset inside its source image (matched on the masked pixels)."""
    from synthcomp.foreground import estimate_background_color, segment_candidates

    for cand in segment_candidates(rgb, estimate_background_color(rgb)):
        x, y, w, h = cand.bbox()
        if (h, w) == asset.mask.bits.shape and np.array_equal(cand.bits[y : y + h, x : x + w], asset.mask.bits):
            return x, y
    raise AssertionError("extracted asset not found in its source image")


# 9


def test_criterion_09_intervention_semantics():
    removal = intervene("a man and a woman in a kitchen with a table", Intervention("remove", "man and a woman")).text
    style = intervene("a cartoon kitchen with a stove", Intervention("style_change", "cartoon", "real")).text
    rnd = random.Random(9)
    vocab_words = ["kitchen", "table", "stove", "street", "tree", "beach", "sky", "road", "a", "the", "with", "near", "on", "in", "and", "old", "red", "wooden"]
    phrases = ["a dog", "two people", "the bus", "a man and a woman", "zebra"]
    broken = 0
    for _ in range(500):
        text = " ".join(rnd.choice(vocab_words) for _ in range(rnd.randint(1, 12)))
        edit = Intervention("add", rnd.choice(phrases), position=rnd.choice(["append", "prepend"]))
        back = intervene(intervene(text, edit), Intervention("remove", edit.target)).text
        broken += back != text
    ok = removal == "a kitchen with a table" and style == "a real kitchen with a stove" and broken == 0
    report(9, "intervention semantics", ok, f"removal={removal!r} style={style!r} add/remove broken={broken}/500")


# 10


def _tiny_asset(k):
    pixels = np.full((4, 4, 3), 10 + 20 * k, np.uint8)
    return ForegroundAsset.from_image(pixels, InstanceMask(np.ones((4, 4), bool)), 1 + k % 2)


def test_criterion_10_asset_balance():
    counts = np.bincount([a for i in range(4) for a in scheduled_assets(i, 4, 8, seed=0)], minlength=8)
    exact = counts.tolist() == [2] * 8

    assets = [_tiny_asset(k) for k in range(8)]
    config = PipelineConfig(target_dataset_size=4, pastes_per_image=4, image_size=(32, 32), rotation_range=(0, 0), scale_range=(1, 1))
    bg = [np.zeros((32, 32, 3), np.uint8)]
    used = {}
    for sample in build_dataset(assets, bg, config):
        for p in sample.placements:
            used[p.asset_digest] = used.get(p.asset_digest, 0) + 1
    pasted_twice = sorted(used.values()) == [2] * 8

    rng = np.random.default_rng(10)
    spread_ok = True
    for _ in range(300):
        n, g, target, seed = (int(v) for v in (rng.integers(1, 40), rng.integers(1, 6), rng.integers(1, 60), rng.integers(1 << 30)))
        c = np.bincount([a for i in range(target) for a in scheduled_assets(i, g, n, seed)], minlength=n)
        spread_ok &= bool(c.max() - c.min() <= 1)
    report(10, "asset usage balance", exact and pasted_twice and spread_ok, f"schedule={counts.tolist()} pasted={sorted(used.values())}")


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-v"]))
