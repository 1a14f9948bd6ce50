"""Crop-pair sampling, voxel correspondences, and intensity/masking augmentations.

Two overlapping, randomly sized crops are resized to a common view shape;
positions sampled in the absolute-coordinate overlap box map into each view by
nearest-voxel rounding of the resize geometry (ties round toward the lower
index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .resample import resize_trilinear
from .synth import Volume

__all__ = [
    "CropSpec",
    "ViewPair",
    "Correspondence",
    "AugmentConfig",
    "sample_crop_pair",
    "map_correspondences",
    "intensity_jitter",
    "random_mask",
]


@dataclass(frozen=True)
class CropSpec:
    origin: tuple[int, int, int]       # voxel offset in the source volume
    size: tuple[int, int, int]         # extents before resize
    target_size: tuple[int, int, int]  # view extents after resize


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    spec1: CropSpec
    spec2: CropSpec
    overlap_lo: tuple[int, int, int]   # absolute-coordinate overlap box [lo, hi)
    overlap_hi: tuple[int, int, int]


@dataclass(frozen=True)
class Correspondence:
    p: tuple[int, int, int]    # absolute voxel position in the source volume
    p1: tuple[int, int, int]   # position in view-1 coordinates
    p2: tuple[int, int, int]   # position in view-2 coordinates


@dataclass(frozen=True)
class AugmentConfig:
    crop_min: tuple[int, int, int] = (24, 24, 24)
    crop_max: tuple[int, int, int] = (48, 48, 48)
    view_size: tuple[int, int, int] = (32, 32, 32)
    min_overlap_voxels: int = 256
    brightness: float = 0.1
    contrast: float = 0.2
    log_gamma: float = 0.3
    mask_block: int = 8
    mask_fraction: float = 0.0


def _sample_spec(extents, cfg: AugmentConfig, rng: np.random.Generator) -> CropSpec:
    size = tuple(int(rng.integers(lo, min(hi, e) + 1)) for lo, hi, e in zip(cfg.crop_min, cfg.crop_max, extents))
    origin = tuple(int(rng.integers(0, e - s + 1)) for s, e in zip(size, extents))
    return CropSpec(origin=origin, size=size, target_size=cfg.view_size)


def _overlap_box(a: CropSpec, b: CropSpec):
    lo = tuple(max(ao, bo) for ao, bo in zip(a.origin, b.origin))
    hi = tuple(min(ao + asz, bo + bsz) for ao, asz, bo, bsz in zip(a.origin, a.size, b.origin, b.size))
    return lo, hi


def _overlap_voxels(lo, hi) -> int:
    n = 1
    for l, h in zip(lo, hi):
        if h <= l:
            return 0
        n *= h - l
    return n


def extract_view(volume: np.ndarray, spec: CropSpec) -> np.ndarray:
    for o, s, e in zip(spec.origin, spec.size, volume.shape):
        if o < 0 or o + s > e:
            raise ValueError(f"crop {spec.origin}+{spec.size} leaves the volume extents {volume.shape}")
    sl = tuple(slice(o, o + s) for o, s in zip(spec.origin, spec.size))
    crop = volume[sl]
    if crop.shape == tuple(spec.target_size):
        return crop.astype(np.float32, copy=True)
    return resize_trilinear(crop.astype(np.float32), spec.target_size)


def sample_crop_pair(vol: Volume, cfg: AugmentConfig, rng: np.random.Generator,
                     max_attempts: int = 100) -> ViewPair:
    """Draw two overlapping random crops and resize both to the view shape."""
    extents = vol.data.shape
    if any(e < lo for e, lo in zip(extents, cfg.crop_min)):
        raise ValueError(f"volume {vol.id} extents {extents} below minimum crop size {cfg.crop_min}")
    for _ in range(max_attempts):
        spec1 = _sample_spec(extents, cfg, rng)
        spec2 = _sample_spec(extents, cfg, rng)
        lo, hi = _overlap_box(spec1, spec2)
        if _overlap_voxels(lo, hi) >= cfg.min_overlap_voxels:
            return ViewPair(
                view1=extract_view(vol.data, spec1),
                view2=extract_view(vol.data, spec2),
                spec1=spec1,
                spec2=spec2,
                overlap_lo=lo,
                overlap_hi=hi,
            )
    raise RuntimeError(
        f"no crop pair with >= {cfg.min_overlap_voxels} overlap voxels in {max_attempts} attempts"
    )


def view_coords(p_abs: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Map absolute voxel positions (N, 3) into view coordinates by nearest-voxel rounding."""
    rel = p_abs - np.asarray(spec.origin)
    scale = np.asarray(spec.target_size, dtype=np.float64) / np.asarray(spec.size, dtype=np.float64)
    cont = rel * scale
    idx = np.ceil(cont - 0.5).astype(np.intp)  # ties toward the lower index
    return np.clip(idx, 0, np.asarray(spec.target_size) - 1)


def map_correspondences(pair: ViewPair, n: int, rng: np.random.Generator) -> list[Correspondence]:
    """Select n distinct absolute positions in the overlap box and map them into both views."""
    lo = np.asarray(pair.overlap_lo)
    hi = np.asarray(pair.overlap_hi)
    box = hi - lo
    total = int(np.prod(box))
    if total < n:
        raise ValueError(f"overlap box has {total} voxels, need {n}")
    flat = rng.choice(total, size=n, replace=False)
    p_abs = np.stack(np.unravel_index(flat, box), axis=1) + lo
    p1 = view_coords(p_abs, pair.spec1)
    p2 = view_coords(p_abs, pair.spec2)
    return [
        Correspondence(p=tuple(int(v) for v in pa), p1=tuple(int(v) for v in a), p2=tuple(int(v) for v in b))
        for pa, a, b in zip(p_abs, p1, p2)
    ]


def intensity_jitter(view: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Monotone per-view transform: gamma, then contrast about the view mean, then brightness."""
    gamma = float(np.exp(rng.uniform(-cfg.log_gamma, cfg.log_gamma)))
    contrast = float(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast))
    brightness = float(rng.uniform(-cfg.brightness, cfg.brightness))
    out = np.power(np.clip(view, 0.0, 1.0), gamma)
    pivot = out.mean()
    out = (out - pivot) * contrast + pivot + brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_mask(view: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Zero out random axis-aligned blocks until the masked fraction reaches the target."""
    if cfg.mask_fraction >= 1.0:
        raise ValueError(f"mask_fraction must be < 1, got {cfg.mask_fraction}")
    if cfg.mask_fraction <= 0.0:
        return view, np.zeros(view.shape, dtype=bool)
    bs = cfg.mask_block
    if any(bs > e for e in view.shape):
        raise ValueError(f"mask block {bs} exceeds view extents {view.shape}")
    mask = np.zeros(view.shape, dtype=bool)
    total = mask.size
    target = cfg.mask_fraction * total
    while mask.sum() < target:
        origin = [int(rng.integers(0, e - bs + 1)) for e in view.shape]
        sl = tuple(slice(o, o + bs) for o in origin)
        mask[sl] = True
    out = view.copy()
    out[mask] = fill
    return out, mask
