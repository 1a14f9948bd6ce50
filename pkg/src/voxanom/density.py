"""Density models over pooled descriptor maps and their training loop.

Four parameterizations: marginal/conditional diagonal Gaussian and
marginal/conditional flow stacks. All of them consume feature maps
(B, d, h, w, s) and emit per-position negative log-density maps (B, h, w, s);
the full log(2*pi) constants are included so the values are true densities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .flows import LOG_2PI, FlowStack, build_flow_stack
from .optim import AdamW, ScheduleConfig, lr_schedule
from .ssl import EncoderCheckpoint, load_encoder
from .synth import Volume

__all__ = [
    "DensityTrainConfig",
    "DensityCheckpoint",
    "gaussian_nll",
    "MarginalGaussian",
    "ConditionalGaussian",
    "MarginalFlow",
    "ConditionalFlow",
    "sincos_condition",
    "sincos_condition_map",
    "build_density_model",
    "pooled_feature_maps",
    "FeatureCache",
    "build_feature_cache",
    "fit_density_on_cache",
    "fit_density",
    "load_density_model",
]

CONDITION_SOURCES = ("none", "sincos", "learned")


@dataclass
class DensityTrainConfig:
    kind: str = "gaussian"             # "gaussian" | "flow"
    condition: str = "learned"         # "none" | "sincos" | "learned"
    pool: tuple[int, int, int] = (2, 2, 2)
    noise_std: float = 0.1
    batch_crops: int = 4               # m feature maps per step, distinct volumes
    steps: int = 800
    cache_crops: int = 160             # pooled feature maps precomputed from frozen encoders
    base_lr: float = 3e-4
    warmup_steps: int = 80
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    flow_blocks: int = 8
    flow_hidden: int = 64
    cond_hidden: int = 32
    gauss_hidden: int = 16
    d_cond_sincos: int = 24
    sincos_scale: float = 100.0
    patch: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    log_every: int = 25
    snapshot_every: int = 100

    def validate(self) -> None:
        if self.kind not in ("gaussian", "flow"):
            raise ValueError(f"unknown density kind {self.kind!r}")
        if self.condition not in CONDITION_SOURCES:
            raise ValueError(f"unknown condition source {self.condition!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.condition == "sincos" and self.d_cond_sincos % 6 != 0:
            raise ValueError(f"sincos condition dim must be divisible by 6, got {self.d_cond_sincos}")


@dataclass
class DensityCheckpoint:
    kind: str                          # "gaussian" | "flow"
    condition: str                     # "none" | "sincos" | "learned"
    d_desc: int
    d_cond: int
    cfg: DensityTrainConfig
    state: dict[str, np.ndarray]
    history: list[tuple[int, float, float]]
    step: int
    diverged: bool = False


# -- Gaussian models ---------------------------------------------------------------


def gaussian_nll(y: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """Diagonal-Gaussian negative log-density along the last axis, constants included."""
    d = y.shape[-1]
    diff = y - mu
    maha = (diff * diff * (-1.0 * logvar).exp()).sum(axis=-1)
    return 0.5 * (maha + logvar.sum(axis=-1) + d * LOG_2PI)


def _map_to_rows(y_map: Tensor) -> Tensor:
    b, d, dd, hh, ww = y_map.shape
    return y_map.transpose(0, 2, 3, 4, 1).reshape(b * dd * hh * ww, d)


class MarginalGaussian(nn.Module):
    def __init__(self, d_desc: int, dtype=np.float32):
        self.d_desc = d_desc
        self.mu = ad.parameter(np.zeros(d_desc, dtype=dtype), name="gauss.mu")
        self.logvar = ad.parameter(np.zeros(d_desc, dtype=dtype), name="gauss.logvar")
        self.needs_condition = False

    def moment_init(self, rows: np.ndarray) -> None:
        self.mu.data = rows.mean(axis=0).astype(self.mu.data.dtype)
        self.logvar.data = np.log(rows.var(axis=0) + 1e-6).astype(self.logvar.data.dtype)

    def nll_map_tensor(self, y_map: Tensor, c_map: Tensor | None = None) -> Tensor:
        b, _, dd, hh, ww = y_map.shape
        rows = _map_to_rows(y_map)
        return gaussian_nll(rows, self.mu, self.logvar).reshape(b, dd, hh, ww)


class ConditionalGaussian(nn.Module):
    """Two conv nets over condition maps predict per-position mean and log-variance.

    3x3x3 first layer = conditioning on the locally aggregated condition
    neighborhood; zero-initialized pointwise output layers start the model at
    the marginal moment estimate stored in the biases.
    """

    def __init__(self, d_desc: int, d_cond: int, hidden: int = 32,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_desc = d_desc
        self.d_cond = d_cond
        self.mu_hidden = nn.Conv3d(d_cond, hidden, kernel=3, padding=1, rng=rng, dtype=dtype, name="mu.h")
        self.mu_out = nn.Conv3d(hidden, d_desc, kernel=1, rng=rng, dtype=dtype, name="mu.out")
        self.lv_hidden = nn.Conv3d(d_cond, hidden, kernel=3, padding=1, rng=rng, dtype=dtype, name="lv.h")
        self.lv_out = nn.Conv3d(hidden, d_desc, kernel=1, rng=rng, dtype=dtype, name="lv.out")
        self.mu_out.weight.data[:] = 0.0
        self.lv_out.weight.data[:] = 0.0
        self.needs_condition = True

    def moment_init(self, rows: np.ndarray) -> None:
        self.mu_out.bias.data = rows.mean(axis=0).astype(self.mu_out.bias.data.dtype)
        self.lv_out.bias.data = np.log(rows.var(axis=0) + 1e-6).astype(self.lv_out.bias.data.dtype)

    def predict(self, c_map: Tensor):
        mu = self.mu_out(self.mu_hidden(c_map).relu())
        logvar = self.lv_out(self.lv_hidden(c_map).relu())
        return mu, logvar

    def nll_map_tensor(self, y_map: Tensor, c_map: Tensor | None = None) -> Tensor:
        if c_map is None:
            raise ValueError("conditional Gaussian requires a condition map")
        if y_map.shape[2:] != c_map.shape[2:]:
            raise ad.ShapeError(
                f"descriptor map {y_map.shape[2:]} and condition map {c_map.shape[2:]} are not aligned"
            )
        mu, logvar = self.predict(c_map)
        diff = y_map - mu
        maha = (diff * diff * (-1.0 * logvar).exp()).sum(axis=1)
        return 0.5 * (maha + logvar.sum(axis=1) + self.d_desc * LOG_2PI)


class MarginalFlow(nn.Module):
    def __init__(self, d_desc: int, blocks: int = 8, hidden: int = 64,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.d_desc = d_desc
        self.stack = build_flow_stack(d_desc, blocks=blocks, cond_dim=0, hidden=hidden,
                                      rng=rng, dtype=dtype)
        self.needs_condition = False

    def initialize_from_rows(self, rows: np.ndarray) -> None:
        self.stack.initialize_from(rows)

    def nll_map_tensor(self, y_map: Tensor, c_map: Tensor | None = None) -> Tensor:
        b, _, dd, hh, ww = y_map.shape
        rows = _map_to_rows(y_map)
        return self.stack.nll_rows(rows).reshape(b, dd, hh, ww)


class ConditionalFlow(nn.Module):
    def __init__(self, d_desc: int, d_cond: int, blocks: int = 8, hidden: int = 64,
                 cond_hidden: int = 32, rng: np.random.Generator | None = None, dtype=np.float32):
        self.d_desc = d_desc
        self.d_cond = d_cond
        self.stack = build_flow_stack(d_desc, blocks=blocks, cond_dim=d_cond, hidden=hidden,
                                      cond_hidden=cond_hidden, rng=rng, dtype=dtype)
        self.needs_condition = True

    def nll_map_tensor(self, y_map: Tensor, c_map: Tensor | None = None) -> Tensor:
        if c_map is None:
            raise ValueError("conditional flow requires a condition map")
        b, _, dd, hh, ww = y_map.shape
        rows = _map_to_rows(y_map)
        cond = _map_to_rows(c_map)
        return self.stack.nll_rows(rows, cond).reshape(b, dd, hh, ww)


def build_density_model(kind: str, condition: str, d_desc: int, d_cond: int,
                        cfg: DensityTrainConfig, rng: np.random.Generator,
                        dtype=np.float32):
    conditional = condition != "none"
    if kind == "gaussian":
        if conditional:
            return ConditionalGaussian(d_desc, d_cond, hidden=cfg.gauss_hidden, rng=rng, dtype=dtype)
        return MarginalGaussian(d_desc, dtype=dtype)
    if conditional:
        return ConditionalFlow(d_desc, d_cond, blocks=cfg.flow_blocks, hidden=cfg.flow_hidden,
                               cond_hidden=cfg.cond_hidden, rng=rng, dtype=dtype)
    return MarginalFlow(d_desc, blocks=cfg.flow_blocks, hidden=cfg.flow_hidden, rng=rng, dtype=dtype)


# -- sin-cos positional conditions ----------------------------------------------------


def sincos_condition(positions: np.ndarray, d_cond: int, scale: float = 100.0) -> np.ndarray:
    """Sinusoidal encoding of absolute voxel positions (N, 3) -> (N, d_cond).

    Per axis: d_cond/6 geometric frequencies, sin block then cos block.
    """
    if d_cond % 6 != 0:
        raise ValueError(f"d_cond must be divisible by 6 (3 axes x sin/cos), got {d_cond}")
    positions = np.asarray(positions, dtype=np.float64)
    nf = d_cond // 6
    freqs = scale ** (-np.arange(nf) / nf)
    out = np.empty((positions.shape[0], d_cond), dtype=np.float32)
    for axis in range(3):
        phase = positions[:, axis : axis + 1] * freqs[None, :]
        base = axis * 2 * nf
        out[:, base : base + nf] = np.sin(phase)
        out[:, base + nf : base + 2 * nf] = np.cos(phase)
    return out


def sincos_condition_map(origin, pooled_shape, pool, d_cond: int, scale: float = 100.0) -> np.ndarray:
    """Condition map (d_cond, h, w, s) at pooled-cell centers in absolute coordinates."""
    axes = [o + np.arange(n) * p + (p - 1) / 2.0 for o, n, p in zip(origin, pooled_shape, pool)]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    pos = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)
    enc = sincos_condition(pos, d_cond, scale=scale)
    return enc.T.reshape(d_cond, *pooled_shape)


# -- feature extraction ------------------------------------------------------------------


def pooled_feature_maps(desc_model, cond_model, vol_data: np.ndarray, origin, cfg: DensityTrainConfig):
    """Frozen-encoder descriptor/condition maps for one patch, average-pooled.

    Returns (y_map (d, h, w, s), c_map (d_cond, h, w, s) or None).
    """
    sl = tuple(slice(o, o + p) for o, p in zip(origin, cfg.patch))
    crop = vol_data[sl].astype(np.float32)[None, None]
    with ad.no_grad():
        y = ad.avg_pool3d(desc_model(Tensor(crop)), cfg.pool).data[0]
        if cfg.condition == "learned":
            c = ad.avg_pool3d(cond_model(Tensor(crop)), cfg.pool).data[0]
        elif cfg.condition == "sincos":
            c = sincos_condition_map(origin, y.shape[1:], cfg.pool, cfg.d_cond_sincos, cfg.sincos_scale)
        else:
            c = None
    return y, c


@dataclass
class FeatureCache:
    y_maps: np.ndarray                  # (K, d, h, w, s)
    c_maps: np.ndarray | None           # (K, d_cond, h, w, s)
    volume_idx: np.ndarray              # (K,) source volume per entry
    d_desc: int = field(init=False)
    d_cond: int = field(init=False)

    def __post_init__(self):
        self.d_desc = self.y_maps.shape[1]
        self.d_cond = self.c_maps.shape[1] if self.c_maps is not None else 0


def build_feature_cache(desc_model, cond_model, volumes: list[Volume],
                        cfg: DensityTrainConfig, rng: np.random.Generator) -> FeatureCache:
    """Precompute pooled feature maps for random patches (encoders are frozen)."""
    ys, cs, vidx = [], [], []
    for k in range(cfg.cache_crops):
        vi = k % len(volumes)
        vol = volumes[vi]
        origin = tuple(
            int(rng.integers(0, e - p + 1)) for e, p in zip(vol.data.shape, cfg.patch)
        )
        y, c = pooled_feature_maps(desc_model, cond_model, vol.data, origin, cfg)
        ys.append(y)
        cs.append(c)
        vidx.append(vi)
    y_maps = np.stack(ys)
    c_maps = np.stack(cs) if cs[0] is not None else None
    return FeatureCache(y_maps=y_maps, c_maps=c_maps, volume_idx=np.asarray(vidx))


# -- training loop -------------------------------------------------------------------------


def _sample_batch_entries(cache: FeatureCache, m: int, rng: np.random.Generator) -> np.ndarray:
    """Pick m cache entries from distinct volumes when possible."""
    vols = np.unique(cache.volume_idx)
    if len(vols) >= m:
        chosen_vols = rng.choice(vols, size=m, replace=False)
        picks = []
        for v in chosen_vols:
            pool = np.flatnonzero(cache.volume_idx == v)
            picks.append(int(rng.choice(pool)))
        return np.asarray(picks)
    return rng.choice(len(cache.volume_idx), size=m, replace=len(cache.volume_idx) < m)


def fit_density_on_cache(model, cache: FeatureCache, cfg: DensityTrainConfig) -> DensityCheckpoint:
    """Optimize the mean NLL over all positions with Gaussian noise injection."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 23])
    rows = cache.y_maps.transpose(0, 2, 3, 4, 1).reshape(-1, cache.d_desc)
    sample = rows[rng.choice(len(rows), size=min(len(rows), 8192), replace=False)]
    if hasattr(model, "moment_init"):
        model.moment_init(sample)
    if hasattr(model, "initialize_from_rows"):
        noisy = sample + rng.normal(0.0, cfg.noise_std, size=sample.shape)
        model.initialize_from_rows(noisy.astype(np.float32))

    named = list(model.named_parameters())
    opt = AdamW(named, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    sched = ScheduleConfig(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps, total_steps=cfg.steps)
    history: list[tuple[int, float, float]] = []
    snapshot = (model.state_dict(), 0)
    diverged = False
    step = 0
    for step in range(1, cfg.steps + 1):
        lr = lr_schedule(step, sched)
        picks = _sample_batch_entries(cache, cfg.batch_crops, rng)
        y = cache.y_maps[picks]
        y = y + rng.normal(0.0, cfg.noise_std, size=y.shape).astype(np.float32)
        c_t = None
        if cache.c_maps is not None:
            c = cache.c_maps[picks]
            c = c + rng.normal(0.0, cfg.noise_std, size=c.shape).astype(np.float32)
            c_t = Tensor(c)
        loss = model.nll_map_tensor(Tensor(y), c_t).mean()
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
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            history.append((step, loss_val, lr))
        if step % cfg.snapshot_every == 0:
            snapshot = (model.state_dict(), step)
    return DensityCheckpoint(
        kind=cfg.kind,
        condition=cfg.condition,
        d_desc=cache.d_desc,
        d_cond=cache.d_cond if cfg.condition != "sincos" else cfg.d_cond_sincos,
        cfg=cfg,
        state=model.state_dict(),
        history=history,
        step=step,
        diverged=diverged,
    )


def fit_density(desc_ckpt: EncoderCheckpoint, cond_ckpt: EncoderCheckpoint | None,
                volumes: list[Volume], cfg: DensityTrainConfig) -> DensityCheckpoint:
    """End-to-end density fit: freeze encoders, cache pooled features, optimize NLL."""
    cfg.validate()
    if desc_ckpt.kind != "descriptor":
        raise ValueError(f"expected a descriptor checkpoint, got kind {desc_ckpt.kind!r}")
    desc_model = load_encoder(desc_ckpt)
    cond_model = None
    d_cond = 0
    if cfg.condition == "learned":
        if cond_ckpt is None:
            raise ValueError("condition='learned' requires a condition checkpoint")
        if cond_ckpt.kind != "condition":
            raise ValueError(f"expected a condition checkpoint, got kind {cond_ckpt.kind!r}")
        cond_model = load_encoder(cond_ckpt)
        d_cond = cond_ckpt.cfg.d_out
    elif cfg.condition == "sincos":
        d_cond = cfg.d_cond_sincos
    cache_rng = np.random.default_rng([cfg.seed, 19])
    cache = build_feature_cache(desc_model, cond_model, volumes, cfg, cache_rng)
    model = build_density_model(cfg.kind, cfg.condition, desc_ckpt.cfg.d_out, d_cond, cfg,
                                np.random.default_rng([cfg.seed, 29]))
    return fit_density_on_cache(model, cache, cfg)


def load_density_model(ckpt: DensityCheckpoint):
    model = build_density_model(ckpt.kind, ckpt.condition, ckpt.d_desc, ckpt.d_cond, ckpt.cfg,
                                np.random.default_rng(0))
    model.load_state_dict(ckpt.state)
    for layer in getattr(getattr(model, "stack", None), "layers", []):
        layer.initialized = True
    return model
