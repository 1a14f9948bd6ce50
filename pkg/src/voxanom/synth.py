"""Synthetic 3-D volumes with structured "normal" anatomy and rare planted anomalies.

Each volume contains a jittered body ellipsoid with two organ-like blobs of
distinct intensity bands and textures, plus thin bright vessels: position-
dependent normal statistics that a condition model can learn. Anomalies are
spheres whose intensity band overlaps the normal bands but whose fine texture
(high-frequency checker) is absent from the normal generator, so raw intensity
thresholds cannot separate them.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .resample import resize_trilinear

__all__ = ["GenConfig", "Volume", "AnnotatedVolume", "gen_normal_volume", "inject_anomalies", "gen_dataset"]

ZONE_BACKGROUND, ZONE_BODY, ZONE_CORE, ZONE_SOFT, ZONE_VESSEL = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class GenConfig:
    extents: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    min_patch: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0

    # background / texture
    texture_amplitude: float = 0.05
    texture_scales: tuple[int, ...] = (16, 8)
    background_intensity: float = 0.14
    body_intensity: float = 0.45
    core_intensity: float = 0.68
    soft_intensity: float = 0.30
    speckle_amplitude: float = 0.07
    vessel_intensity: float = 0.85
    vessel_count: tuple[int, int] = (2, 4)
    vessel_radius: float = 1.6

    # anomalies
    anomaly_count: tuple[int, int] = (2, 4)
    anomaly_radius: tuple[float, float] = (3.5, 6.5)
    anomaly_offset: tuple[float, float] = (0.10, 0.20)
    checker_period: int = 2
    checker_amplitude: float = 0.12
    rarity_fraction: float = 0.01
    max_fraction: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.rarity_fraction <= 0.05):
            raise ValueError(f"rarity_fraction must be in (0, 0.05], got {self.rarity_fraction}")
        if self.anomaly_radius[0] < 2.0:
            raise ValueError(f"anomaly radius must be >= 2 voxels, got {self.anomaly_radius[0]}")
        if any(e < p for e, p in zip(self.extents, self.min_patch)):
            raise ValueError(f"extents {self.extents} smaller than patch size {self.min_patch}")


@dataclass
class Volume:
    data: np.ndarray                      # float32 intensities in [0, 1], (D, H, W)
    spacing: tuple[float, float, float]
    id: str
    zones: np.ndarray | None = None       # uint8 structural labels, diagnostics only


@dataclass
class AnnotatedVolume:
    volume: Volume
    anomaly_mask: np.ndarray              # uint8, same extents, 1 = planted voxel


def _rng_for(seed: int, tag: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(tag.encode()), index])


def _smooth_field(rng: np.random.Generator, extents, scales, amplitude: float) -> np.ndarray:
    out = np.zeros(extents, dtype=np.float32)
    amp = amplitude
    for scale in scales:
        coarse = rng.standard_normal([max(2, int(np.ceil(e / scale)) + 1) for e in extents]).astype(np.float32)
        out += amp * resize_trilinear(coarse, extents)
        amp *= 0.5
    return out


def _ellipsoid(grids, center, semi) -> np.ndarray:
    zz, yy, xx = grids
    return (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    ) <= 1.0


def gen_normal_volume(cfg: GenConfig, uid: int, role: str = "vol") -> Volume:
    """Deterministic structured volume for (cfg.seed, uid); anomalies not included."""
    if any(e < p for e, p in zip(cfg.extents, cfg.min_patch)):
        raise ValueError(f"extents {cfg.extents} smaller than patch size {cfg.min_patch}")
    rng = _rng_for(cfg.seed, f"normal-{role}", uid)
    ext = np.asarray(cfg.extents, dtype=np.float64)
    grids = np.ogrid[0 : cfg.extents[0], 0 : cfg.extents[1], 0 : cfg.extents[2]]

    body_center = ext / 2 + rng.uniform(-0.06, 0.06, size=3) * ext
    body_semi = rng.uniform(0.36, 0.44, size=3) * ext
    body = _ellipsoid(grids, body_center, body_semi)

    # two organ blobs with heavily jittered placement inside the body
    core_center = body_center + rng.uniform(-0.45, 0.45, size=3) * body_semi * 0.55
    core_semi = rng.uniform(0.13, 0.19, size=3) * ext
    core = _ellipsoid(grids, core_center, core_semi) & body

    for _ in range(20):
        soft_center = body_center + rng.uniform(-0.55, 0.55, size=3) * body_semi * 0.65
        if np.linalg.norm((soft_center - core_center) / (core_semi + 1e-9)) > 1.6:
            break
    soft_semi = rng.uniform(0.10, 0.16, size=3) * ext
    soft = _ellipsoid(grids, soft_center, soft_semi) & body & ~core

    zones = np.zeros(cfg.extents, dtype=np.uint8)
    zones[body] = ZONE_BODY
    zones[core] = ZONE_CORE
    zones[soft] = ZONE_SOFT

    vol = np.full(cfg.extents, cfg.background_intensity, dtype=np.float32)
    vol[body] = cfg.body_intensity
    vol[core] = cfg.core_intensity
    vol[soft] = cfg.soft_intensity

    # thin bright rods crossing the core blob: rare-but-normal structure
    n_vessels = int(rng.integers(cfg.vessel_count[0], cfg.vessel_count[1] + 1))
    zz, yy, xx = np.ogrid[0 : cfg.extents[0], 0 : cfg.extents[1], 0 : cfg.extents[2]]
    coords = (zz, yy, xx)
    for _ in range(n_vessels):
        axis = int(rng.integers(0, 3))
        c = core_center + rng.uniform(-0.5, 0.5, size=3) * core_semi
        lo = core_center[axis] - core_semi[axis]
        hi = core_center[axis] + core_semi[axis]
        others = [i for i in range(3) if i != axis]
        dist2 = sum((coords[i] - c[i]) ** 2 for i in others)
        tube = (dist2 <= cfg.vessel_radius**2) & (coords[axis] >= lo) & (coords[axis] <= hi) & core
        vol[tube] = cfg.vessel_intensity
        zones[tube] = ZONE_VESSEL

    # multi-octave smooth texture everywhere + fine speckle restricted to the core blob
    if cfg.texture_amplitude > 0:
        vol += _smooth_field(rng, cfg.extents, cfg.texture_scales, cfg.texture_amplitude)
        if cfg.speckle_amplitude > 0:
            speckled = core & (zones != ZONE_VESSEL)
            speckle = rng.standard_normal(cfg.extents).astype(np.float32)
            vol[speckled] += cfg.speckle_amplitude * speckle[speckled]

    np.clip(vol, 0.0, 1.0, out=vol)
    return Volume(data=vol, spacing=cfg.spacing, id=f"{role}-{uid:05d}", zones=zones)


def _checker(extents, period: int) -> np.ndarray:
    zz, yy, xx = np.ogrid[0 : extents[0], 0 : extents[1], 0 : extents[2]]
    parity = (zz // period + yy // period + xx // period) % 2
    return (parity * 2 - 1).astype(np.float32)


def inject_anomalies(vol: Volume, cfg: GenConfig, count: int | None = None) -> AnnotatedVolume:
    """Plant textured spheres inside the body; the mask marks exactly the modified voxels."""
    rng = _rng_for(cfg.seed, "anomaly", zlib.crc32(vol.id.encode()))
    data = vol.data.copy()
    mask = np.zeros(vol.data.shape, dtype=np.uint8)
    if count is None:
        count = int(rng.integers(cfg.anomaly_count[0], cfg.anomaly_count[1] + 1))
    if count == 0:
        return AnnotatedVolume(Volume(data, vol.spacing, vol.id, vol.zones), mask)

    extents = vol.data.shape
    total = int(np.prod(extents))
    checker = _checker(extents, cfg.checker_period)
    inside = vol.zones is not None
    grids = np.ogrid[0 : extents[0], 0 : extents[1], 0 : extents[2]]

    placed = 0
    for _ in range(count):
        radius = float(rng.uniform(*cfg.anomaly_radius))
        margin = radius + 1
        for _attempt in range(50):
            center = rng.uniform(margin, np.asarray(extents, dtype=np.float64) - margin)
            if not inside or vol.zones[tuple(np.round(center).astype(int))] != ZONE_BACKGROUND:
                break
        else:
            continue
        sphere = (
            (grids[0] - center[0]) ** 2 + (grids[1] - center[1]) ** 2 + (grids[2] - center[2]) ** 2
        ) <= radius**2
        if (mask.sum() + sphere.sum()) / total > cfg.max_fraction:
            raise ValueError(
                f"cannot place {count} anomalies without exceeding the {cfg.max_fraction:.0%} voxel cap"
            )
        offset = float(rng.uniform(*cfg.anomaly_offset))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        base_mean = float(vol.data[sphere].mean())
        if base_mean + sign * (offset + cfg.checker_amplitude) > 0.97 or base_mean + sign * (
            offset - cfg.checker_amplitude
        ) < 0.03:
            sign = -sign
        data[sphere] = vol.data[sphere] + sign * offset + cfg.checker_amplitude * checker[sphere]
        mask[sphere] = 1
        placed += 1

    np.clip(data, 0.0, 1.0, out=data)
    data[mask == 0] = vol.data[mask == 0]  # clipping must not leak outside the mask
    return AnnotatedVolume(Volume(data, vol.spacing, vol.id, vol.zones), mask)


def gen_dataset(cfg: GenConfig, n_train: int, n_test: int):
    """Training volumes (anomalies present, masks discarded) and annotated test volumes."""
    if n_train < 1 or n_test < 1:
        raise ValueError(f"n_train and n_test must be >= 1, got {n_train}, {n_test}")
    train = []
    for i in range(n_train):
        ann = inject_anomalies(gen_normal_volume(cfg, i, role="train"), cfg)
        train.append(ann.volume)
    test = []
    for i in range(n_test):
        test.append(inject_anomalies(gen_normal_volume(cfg, i, role="test"), cfg))
    return train, test
