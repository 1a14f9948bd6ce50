"""Whole-volume anomaly-map inference, distillation into one network, fine-tuning.

Inference tiles a volume into overlapping patches, scores each patch at pooled
resolution through the descriptor/condition/density stack, upsamples scores
back to voxel resolution (nearest neighbor), and averages overlapping patch
contributions per voxel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .density import DensityCheckpoint, DensityTrainConfig, load_density_model, pooled_feature_maps
from .optim import AdamW, ScheduleConfig, lr_schedule
from .ssl import EncoderCheckpoint, load_encoder
from .synth import AnnotatedVolume, Volume

__all__ = [
    "PatchGrid",
    "AnomalyMap",
    "ScoreBundle",
    "BundleError",
    "tile_volume",
    "load_bundle",
    "infer_anomaly_map",
    "DistillConfig",
    "FinetuneConfig",
    "StudentCheckpoint",
    "bce_loss",
    "soft_dice_loss",
    "distill",
    "finetune_segmentation",
    "load_student",
    "predict_student_map",
    "predict_probability_map",
]


class BundleError(ValueError):
    """Inconsistent model combination (dimension or condition-source mismatch)."""


@dataclass(frozen=True)
class PatchGrid:
    patch: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: list[tuple[int, int, int]]


@dataclass
class AnomalyMap:
    scores: np.ndarray     # float32, volume extents
    coverage: np.ndarray   # int32 count of contributing patches per voxel


def _axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, extent - patch + 1, stride))
    last = extent - patch
    if origins[-1] != last:
        origins.append(last)
    return origins


def tile_volume(extents, patch, stride) -> PatchGrid:
    """Patch origins at stride multiples, with the final origin clamped per axis."""
    patch = tuple(int(p) for p in patch)
    stride = tuple(int(s) for s in stride)
    for e, p, axis in zip(extents, patch, ("depth", "height", "width")):
        if p > e:
            raise ValueError(f"patch ({p}) exceeds volume extent ({e}) on axis {axis}")
    for s, p in zip(stride, patch):
        if s < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if s > p:
            raise ValueError(f"stride {stride} exceeds patch {patch}; tiling would leave gaps")
    per_axis = [_axis_origins(e, p, s) for e, p, s in zip(extents, patch, stride)]
    origins = [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]
    return PatchGrid(patch=patch, stride=stride, origins=origins)


@dataclass
class ScoreBundle:
    """Frozen descriptor + condition source + density model, validated for consistency."""

    desc_model: nn.UNet3d
    cond_model: nn.UNet3d | None
    density_model: object
    density_cfg: DensityTrainConfig
    condition: str
    d_desc: int
    d_cond: int


def load_bundle(desc_ckpt: EncoderCheckpoint, cond_ckpt: EncoderCheckpoint | None,
                dens_ckpt: DensityCheckpoint) -> ScoreBundle:
    if desc_ckpt.kind != "descriptor":
        raise BundleError(f"descriptor slot holds a {desc_ckpt.kind!r} checkpoint")
    if dens_ckpt.d_desc != desc_ckpt.cfg.d_out:
        raise BundleError(
            f"descriptor dim mismatch: density model expects d_desc={dens_ckpt.d_desc}, "
            f"descriptor outputs {desc_ckpt.cfg.d_out}"
        )
    cond_model = None
    if dens_ckpt.condition == "learned":
        if cond_ckpt is None:
            raise BundleError("density model was trained with a learned condition; none supplied")
        if cond_ckpt.kind != "condition":
            raise BundleError(f"condition slot holds a {cond_ckpt.kind!r} checkpoint")
        if cond_ckpt.cfg.d_out != dens_ckpt.d_cond:
            raise BundleError(
                f"condition dim mismatch: density expects d_cond={dens_ckpt.d_cond}, "
                f"condition model outputs {cond_ckpt.cfg.d_out}"
            )
        cond_model = load_encoder(cond_ckpt)
    elif cond_ckpt is not None:
        raise BundleError(
            f"density model was trained with condition={dens_ckpt.condition!r}; "
            "a learned condition checkpoint was supplied"
        )
    cfg = dens_ckpt.cfg
    for p, q in zip(cfg.patch, cfg.pool):
        if p % q != 0:
            raise BundleError(f"patch {cfg.patch} not divisible by pooling {cfg.pool}")
    return ScoreBundle(
        desc_model=load_encoder(desc_ckpt),
        cond_model=cond_model,
        density_model=load_density_model(dens_ckpt),
        density_cfg=cfg,
        condition=dens_ckpt.condition,
        d_desc=dens_ckpt.d_desc,
        d_cond=dens_ckpt.d_cond,
    )


def _patch_scores(bundle: ScoreBundle, vol_data: np.ndarray, origin) -> np.ndarray:
    """Per-voxel NLL scores for one patch (pooled NLL, nearest-upsampled)."""
    cfg = bundle.density_cfg
    y, c = pooled_feature_maps(bundle.desc_model, bundle.cond_model, vol_data, origin, cfg)
    with ad.no_grad():
        nll = bundle.density_model.nll_map_tensor(
            Tensor(y[None]), Tensor(c[None]) if c is not None else None
        ).data[0]
    for axis, f in enumerate(cfg.pool):
        nll = np.repeat(nll, f, axis=axis)
    return nll


def infer_anomaly_map(vol: Volume, bundle: ScoreBundle, grid: PatchGrid | None = None,
                      stride=None) -> AnomalyMap:
    """Score every voxel as the mean NLL over all patches covering it."""
    cfg = bundle.density_cfg
    if grid is None:
        stride = stride if stride is not None else tuple(p // 2 for p in cfg.patch)
        grid = tile_volume(vol.data.shape, cfg.patch, stride)
    if grid.patch != tuple(cfg.patch):
        raise BundleError(f"grid patch {grid.patch} does not match density patch {cfg.patch}")
    sums = np.zeros(vol.data.shape, dtype=np.float64)
    coverage = np.zeros(vol.data.shape, dtype=np.int32)
    for origin in grid.origins:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, grid.patch))
        sums[sl] += _patch_scores(bundle, vol.data, origin)
        coverage[sl] += 1
    if coverage.min() < 1:
        raise RuntimeError("patch grid left voxels uncovered")
    return AnomalyMap(scores=(sums / coverage).astype(np.float32), coverage=coverage)


# -- distillation -------------------------------------------------------------------


@dataclass
class DistillConfig:
    crops: int = 160                   # teacher maps precomputed on random crops
    steps: int = 600
    batch: int = 4
    base_lr: float = 3e-4
    warmup_steps: int = 60
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 25
    snapshot_every: int = 100


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch: int = 4
    base_lr: float = 3e-4
    warmup_steps: int = 30
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 25
    snapshot_every: int = 100


@dataclass
class StudentCheckpoint:
    kind: str                          # "distilled" | "finetuned"
    base_channels: int
    depth: int
    patch: tuple[int, int, int]
    state: dict[str, np.ndarray]
    history: list[tuple[int, float, float]]
    step: int
    diverged: bool = False


def bce_loss(probs: Tensor, targets: Tensor, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy on probabilities (clipped away from 0 and 1)."""
    p = probs.clip(eps, 1.0 - eps)
    return -(targets * p.log() + (1.0 - targets) * (1.0 - p).log()).mean()


def soft_dice_loss(probs: Tensor, targets: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p*t) + 1) / (sum(p) + sum(t) + 1) over the whole batch."""
    inter = (probs * targets).sum()
    denom = probs.sum() + targets.sum()
    return 1.0 - (2.0 * inter + smooth) * ((denom + smooth) ** -1.0)


def _build_student(base_channels: int, depth: int, rng: np.random.Generator) -> nn.UNet3d:
    return nn.UNet3d(1, 1, base_channels=base_channels, depth=depth, rng=rng)


def _train_regression(model: nn.Module, batches_fn, steps: int, cfg) -> tuple[list, int, bool]:
    named = list(model.named_parameters())
    opt = AdamW(named, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    sched = ScheduleConfig(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps, total_steps=steps)
    history: list[tuple[int, float, float]] = []
    snapshot = (model.state_dict(), 0)
    diverged = False
    step = 0
    for step in range(1, steps + 1):
        lr = lr_schedule(step, sched)
        loss = batches_fn(step)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            model.load_state_dict(snapshot[0])
            step = snapshot[1]
            diverged = True
            break
        opt.zero_grad()
        loss.backward()
        nn.clip_grad_norm([p for _, p in named], cfg.clip_norm)
        opt.step(lr)
        if step % cfg.log_every == 0 or step == 1 or step == steps:
            history.append((step, loss_val, lr))
        if step % cfg.snapshot_every == 0:
            snapshot = (model.state_dict(), step)
    return history, step, diverged


def distill(bundle: ScoreBundle, desc_cfg_channels: tuple[int, int], volumes: list[Volume],
            cfg: DistillConfig) -> StudentCheckpoint:
    """Regress the modular pipeline's per-voxel scores into a single network (MSE)."""
    base_channels, depth = desc_cfg_channels
    patch = tuple(bundle.density_cfg.patch)
    rng = np.random.default_rng([cfg.seed, 31])
    crops = np.empty((cfg.crops, 1) + patch, dtype=np.float32)
    targets = np.empty((cfg.crops,) + patch, dtype=np.float32)
    for k in range(cfg.crops):
        vol = volumes[k % len(volumes)]
        origin = tuple(int(rng.integers(0, e - p + 1)) for e, p in zip(vol.data.shape, patch))
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        crops[k, 0] = vol.data[sl]
        targets[k] = _patch_scores(bundle, vol.data, origin)

    student = _build_student(base_channels, depth, np.random.default_rng([cfg.seed, 37]))

    def batch_loss(step: int) -> Tensor:
        picks = rng.choice(cfg.crops, size=min(cfg.batch, cfg.crops), replace=False)
        x = Tensor(crops[picks])
        t = Tensor(targets[picks])
        pred = student(x).reshape((len(picks),) + patch)
        diff = pred - t
        return (diff * diff).mean()

    history, step, diverged = _train_regression(student, batch_loss, cfg.steps, cfg)
    return StudentCheckpoint(
        kind="distilled", base_channels=base_channels, depth=depth, patch=patch,
        state=student.state_dict(), history=history, step=step, diverged=diverged,
    )


def load_student(ckpt: StudentCheckpoint) -> nn.UNet3d:
    model = _build_student(ckpt.base_channels, ckpt.depth, np.random.default_rng(0))
    model.load_state_dict(ckpt.state)
    return model


def finetune_segmentation(student_ckpt: StudentCheckpoint, labeled: list[AnnotatedVolume],
                          cfg: FinetuneConfig) -> StudentCheckpoint:
    """Reinitialize the last conv, append a sigmoid, train with BCE + soft-Dice."""
    if not any(ann.anomaly_mask.any() for ann in labeled):
        raise ValueError("every labeled volume has an empty foreground; nothing to fine-tune on")
    patch = student_ckpt.patch
    model = load_student(student_ckpt)
    head_rng = np.random.default_rng([cfg.seed, 41])
    fresh = nn.Conv3d(model.head.weight.shape[1], 1, kernel=1, rng=head_rng, name="head")
    model.head.weight.data = fresh.weight.data
    model.head.bias.data = fresh.bias.data
    rng = np.random.default_rng([cfg.seed, 43])

    def batch_loss(step: int) -> Tensor:
        xs, ts = [], []
        for _ in range(cfg.batch):
            ann = labeled[int(rng.integers(0, len(labeled)))]
            origin = tuple(int(rng.integers(0, e - p + 1)) for e, p in zip(ann.volume.data.shape, patch))
            sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
            xs.append(ann.volume.data[sl])
            ts.append(ann.anomaly_mask[sl])
        x = Tensor(np.stack(xs)[:, None].astype(np.float32))
        t = Tensor(np.stack(ts).astype(np.float32))
        probs = model(x).reshape((cfg.batch,) + patch).sigmoid()
        return bce_loss(probs, t) + soft_dice_loss(probs, t)

    history, step, diverged = _train_regression(model, batch_loss, cfg.steps, cfg)
    return StudentCheckpoint(
        kind="finetuned", base_channels=student_ckpt.base_channels, depth=student_ckpt.depth,
        patch=patch, state=model.state_dict(), history=history, step=step, diverged=diverged,
    )


def _tiled_student_map(model: nn.UNet3d, vol: Volume, patch, stride, transform) -> np.ndarray:
    grid = tile_volume(vol.data.shape, patch, stride)
    sums = np.zeros(vol.data.shape, dtype=np.float64)
    coverage = np.zeros(vol.data.shape, dtype=np.int32)
    with ad.no_grad():
        for origin in grid.origins:
            sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
            x = Tensor(vol.data[sl][None, None].astype(np.float32))
            out = model(x).data[0, 0]
            sums[sl] += transform(out)
            coverage[sl] += 1
    return (sums / coverage).astype(np.float32)


def predict_student_map(ckpt: StudentCheckpoint, vol: Volume, stride=None) -> np.ndarray:
    """Distilled regression scores over a whole volume (overlap-averaged)."""
    model = load_student(ckpt)
    stride = stride if stride is not None else tuple(p // 2 for p in ckpt.patch)
    return _tiled_student_map(model, vol, ckpt.patch, stride, lambda o: o)


def predict_probability_map(ckpt: StudentCheckpoint, vol: Volume, stride=None) -> np.ndarray:
    """Fine-tuned per-voxel probabilities over a whole volume (overlap-averaged)."""
    if ckpt.kind != "finetuned":
        raise ValueError(f"probability maps need a finetuned checkpoint, got {ckpt.kind!r}")
    model = load_student(ckpt)
    stride = stride if stride is not None else tuple(p // 2 for p in ckpt.patch)

    def sigmoid(o):
        return 1.0 / (1.0 + np.exp(-o))

    return _tiled_student_map(model, vol, ckpt.patch, stride, sigmoid)
