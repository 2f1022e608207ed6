"""Cut-and-paste composition: augment, place, blend, resolve occlusion, label."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import cv2
import numpy as np
from scipy import ndimage

from synthcomp.config import derive_rng
from synthcomp.foreground import ForegroundAsset, InstanceMask
from synthcomp.imaging import mask_bbox

MAX_PLACEMENT_TRIES = 100
MAX_CONSECUTIVE_SKIPS = 10


@dataclass(frozen=True)
class AugParams:
    rotation: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class Placement:
    offset: tuple[int, int]
    asset_digest: str
    aug: AugParams
    order: int


@dataclass
class Annotation:
    category_id: int
    bbox: tuple[int, int, int, int]
    mask: InstanceMask
    area: int
    instance_id: int = 0


@dataclass
class ComposedSample:
    index: int
    image: np.ndarray
    annotations: list[Annotation]
    background_id: str = ""
    seed_record: tuple = ()
    placements: list[Placement] = field(default_factory=list)
    pasted_masks: list[np.ndarray] = field(default_factory=list, repr=False)
    pasted_colors: list[np.ndarray] = field(default_factory=list, repr=False)
    dropped: int = 0


def sample_augmentation(rng: np.random.Generator, config) -> AugParams:
    rot_lo, rot_hi = config.rotation_range
    sc_lo, sc_hi = config.scale_range
    return AugParams(float(rng.uniform(rot_lo, rot_hi)), float(rng.uniform(sc_lo, sc_hi)))


def transform_asset(asset: ForegroundAsset, aug: AugParams):
    """Rotate then scale about the cutout center.

    Color is resampled bilinearly on premultiplied alpha; the mask is
    resampled bilinearly and re-binarized at 0.5. Returns ``(rgb, mask)``
    cropped to the mask's tight bbox, or None when the mask vanishes.
    """
    if aug.scale <= 0:
        raise ValueError("scale must be positive")
    bits = asset.mask.bits
    if aug.rotation == 0.0 and aug.scale == 1.0:
        return asset.rgba[..., :3].copy(), bits.copy()
    h, w = bits.shape
    theta = math.radians(aug.rotation)
    cos, sin = math.cos(theta) * aug.scale, math.sin(theta) * aug.scale
    linear = np.array([[cos, sin], [-sin, cos]])
    corners = np.array([[-0.5, -0.5], [w - 0.5, -0.5], [-0.5, h - 0.5], [w - 0.5, h - 0.5]])
    center = np.array([(w - 1) / 2, (h - 1) / 2])
    moved = (corners - center) @ linear.T
    out_w = max(1, math.ceil(moved[:, 0].max() - moved[:, 0].min() - 1e-9))
    out_h = max(1, math.ceil(moved[:, 1].max() - moved[:, 1].min() - 1e-9))
    out_center = np.array([(out_w - 1) / 2, (out_h - 1) / 2])
    matrix = np.hstack([linear, (out_center - linear @ center)[:, None]])
    alpha = bits.astype(np.float32)
    premult = asset.rgba[..., :3].astype(np.float32) * alpha[..., None]
    warp = dict(dsize=(out_w, out_h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    a = cv2.warpAffine(alpha, matrix, **warp)
    rgb = cv2.warpAffine(premult, matrix, **warp)
    mask = a >= 0.5
    box = mask_bbox(mask)
    if box is None:
        return None
    x, y, bw, bh = box
    mask = mask[y : y + bh, x : x + bw]
    a = a[y : y + bh, x : x + bw]
    rgb = rgb[y : y + bh, x : x + bw]
    color = np.where(mask[..., None], rgb / np.maximum(a, 1e-6)[..., None], 0)
    return np.clip(np.floor(color + 0.5), 0, 255).astype(np.uint8), mask


def _visible_area(mask: np.ndarray, offset, bg_shape) -> int:
    x, y = offset
    h, w = mask.shape
    H, W = bg_shape
    x0, y0 = max(0, -x), max(0, -y)
    x1, y1 = min(w, W - x), min(h, H - y)
    if x1 <= x0 or y1 <= y0:
        return 0
    return int(mask[y0:y1, x0:x1].sum())


def place(mask_shape, bg_shape, rng: np.random.Generator, config, mask: np.ndarray | None = None):
    """Offset ``(x, y)`` of the asset's top-left corner, or None to skip the asset.

    Offsets are drawn uniformly over every position that leaves at least one
    pixel in frame and accepted once the in-frame part covers
    ``min_visible_fraction`` of the mask (of the bbox when no mask is given).
    """
    h, w = mask_shape
    H, W = bg_shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    total = int(mask.sum())
    need = config.min_visible_fraction * total
    for _ in range(MAX_PLACEMENT_TRIES):
        x = int(rng.integers(-w + 1, W))
        y = int(rng.integers(-h + 1, H))
        if total and _visible_area(mask, (x, y), (H, W)) >= need:
            return (x, y)
    centered = ((W - w) // 2, (H - h) // 2)
    if total and _visible_area(mask, centered, (H, W)) >= need:
        return centered
    return None


def _window(mask_shape, offset, bg_shape, pad):
    h, w = mask_shape
    H, W = bg_shape
    x, y = offset
    return max(0, y - pad), min(H, y + h + pad), max(0, x - pad), min(W, x + w + pad)


def blur_radius(sigma: float) -> int:
    return math.ceil(3 * sigma)


def alpha_field(full_mask: np.ndarray, sigma: float) -> np.ndarray:
    """Binary mask smoothed by a normalized Gaussian (radius ceil(3*sigma), edges clamped)."""
    if sigma == 0:
        return full_mask.astype(np.float64)
    soft = ndimage.gaussian_filter(full_mask.astype(np.float64), sigma, mode="nearest", radius=blur_radius(sigma))
    return np.clip(soft, 0.0, 1.0)


def blend(background: np.ndarray, rgb: np.ndarray, mask: np.ndarray, offset, sigma: float):
    """Paste ``rgb`` through ``mask`` at ``offset``; returns (image, in-frame mask, fg color field).

    Foreground colors are extended outward by nearest-pixel fill so the soft
    edge outside the mask blends toward the object's own border color.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    H, W = background.shape[:2]
    h, w = mask.shape
    x, y = offset
    pad = blur_radius(sigma)
    wy0, wy1, wx0, wx1 = _window((h, w), offset, (H, W), pad)
    out = background.copy()
    full_mask = np.zeros((H, W), dtype=bool)
    if wy1 <= wy0 or wx1 <= wx0:
        return out, full_mask, None
    local_mask = np.zeros((wy1 - wy0, wx1 - wx0), dtype=bool)
    local_rgb = np.zeros((wy1 - wy0, wx1 - wx0, 3), dtype=np.uint8)
    # intersection of asset and window, in both frames
    sy0, sx0 = max(wy0 - y, 0), max(wx0 - x, 0)
    sy1, sx1 = min(wy1 - y, h), min(wx1 - x, w)
    if sy1 > sy0 and sx1 > sx0:
        ty0, tx0 = y + sy0 - wy0, x + sx0 - wx0
        local_mask[ty0 : ty0 + sy1 - sy0, tx0 : tx0 + sx1 - sx0] = mask[sy0:sy1, sx0:sx1]
        local_rgb[ty0 : ty0 + sy1 - sy0, tx0 : tx0 + sx1 - sx0] = rgb[sy0:sy1, sx0:sx1]
    if not local_mask.any():
        return out, full_mask, None
    full_mask[wy0:wy1, wx0:wx1] = local_mask
    if sigma > 0:
        _, (iy, ix) = ndimage.distance_transform_edt(~local_mask, return_indices=True)
        local_rgb = local_rgb[iy, ix]
    alpha = alpha_field(local_mask, sigma)[..., None]
    bg = background[wy0:wy1, wx0:wx1].astype(np.float64)
    mixed = alpha * local_rgb.astype(np.float64) + (1.0 - alpha) * bg
    out[wy0:wy1, wx0:wx1] = np.clip(np.floor(mixed + 0.5), 0, 255).astype(np.uint8)
    color = np.zeros((H, W, 3), dtype=np.uint8)
    color[wy0:wy1, wx0:wx1] = local_rgb
    return out, full_mask, color


def derive_annotation(mask, category_id: int, instance_id: int = 0) -> Annotation:
    mask = mask if isinstance(mask, InstanceMask) else InstanceMask(mask)
    box = mask.bbox()
    if box is None:
        raise ValueError("cannot annotate an empty mask")
    return Annotation(category_id, box, mask, mask.area, instance_id)


def compose_sample(background, assets, rng: np.random.Generator, config, replacement=None, index: int = 0) -> ComposedSample:
    """Paste ``assets`` in order onto ``background`` and derive visible-mask labels.

    ``replacement(rng)`` supplies a substitute when an asset cannot be
    transformed or placed; after ``MAX_CONSECUTIVE_SKIPS`` failures in a row the
    slot is given up.
    """
    pixels = background.pixels if hasattr(background, "pixels") else np.asarray(background)
    image = pixels.copy()
    H, W = image.shape[:2]
    instances = []  # (category_id, visible mask, pasted area)
    sample = ComposedSample(index, image, [], getattr(background, "digest", ""))
    for asset in assets:
        skips = 0
        while True:
            aug = sample_augmentation(rng, config)
            transformed = transform_asset(asset, aug)
            offset = None
            if transformed is not None:
                offset = place(transformed[1].shape, (H, W), rng, config, transformed[1])
            if offset is not None:
                break
            skips += 1
            if skips >= MAX_CONSECUTIVE_SKIPS or replacement is None:
                asset = None
                break
            asset = replacement(rng)
        if asset is None:
            continue
        rgb, mask = transformed
        image, full_mask, color = blend(image, rgb, mask, offset, config.blur_sigma)
        if not full_mask.any():
            continue
        for inst in instances:
            inst[1] &= ~full_mask
        instances.append([asset.category_id, full_mask.copy(), int(full_mask.sum())])
        sample.placements.append(Placement(offset, asset.digest, aug, len(sample.placements)))
        sample.pasted_masks.append(full_mask)
        sample.pasted_colors.append(color)
    sample.image = image
    for cid, visible, pasted in instances:
        area = int(visible.sum())
        if area == 0 or area < config.occlusion_drop_fraction * pasted:
            sample.dropped += 1
            continue
        sample.annotations.append(derive_annotation(visible, cid, len(sample.annotations) + 1))
    return sample


@lru_cache(maxsize=64)
def _epoch_permutation(seed: int, n: int, epoch: int) -> tuple[int, ...]:
    return tuple(int(i) for i in derive_rng(seed, "fg_epoch", epoch).permutation(n))


def scheduled_assets(index: int, pastes: int, n_assets: int, seed: int) -> list[int]:
    """Asset indices for sample ``index`` from the repeating, per-epoch reshuffled schedule."""
    out = []
    for g in range(pastes):
        slot = index * pastes + g
        epoch, pos = divmod(slot, n_assets)
        out.append(_epoch_permutation(seed, n_assets, epoch)[pos])
    return out


def build_dataset(fg_store, backgrounds, config, seed: int | None = None, workers: int = 1, start: int = 0, stop: int | None = None):
    """Yield ``target_dataset_size`` composed samples in index order.

    Sample ``i`` only reads the ``("compose", i)`` stream, so output does not
    depend on ``workers``.
    """
    assets = fg_store.assets() if hasattr(fg_store, "assets") else list(fg_store)
    backgrounds = list(backgrounds)
    if not assets:
        raise ValueError("foreground store is empty")
    if not backgrounds:
        raise ValueError("background store is empty")
    seed = config.master_seed if seed is None else seed
    stop = config.target_dataset_size if stop is None else stop

    def make(i: int) -> ComposedSample:
        rng = derive_rng(seed, "compose", i)
        bg = backgrounds[int(rng.integers(len(backgrounds)))]
        chosen = [assets[k] for k in scheduled_assets(i, config.pastes_per_image, len(assets), seed)]
        sample = compose_sample(bg, chosen, rng, config, lambda r: assets[int(r.integers(len(assets)))], index=i)
        sample.seed_record = ("compose", i)
        return sample

    if workers <= 1:
        for i in range(start, stop):
            yield make(i)
        return
    chunk = max(workers * 4, 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for lo in range(start, stop, chunk):
            yield from pool.map(make, range(lo, min(lo + chunk, stop)))
