"""Dense self-supervised training of the descriptor and condition encoders.

Positive pairs are embeddings of the same source voxel seen through two
augmented crops. The descriptor and condition models share everything except
that condition training adds random block masking, which forces its embeddings
to be predictable from surrounding context alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .optim import AdamW, ScheduleConfig, lr_schedule
from .synth import Volume
from .views import AugmentConfig, intensity_jitter, map_correspondences, random_mask, sample_crop_pair

__all__ = [
    "SslConfig",
    "EncoderCheckpoint",
    "infonce_loss",
    "vicreg_loss",
    "build_encoder",
    "load_encoder",
    "train_descriptor",
    "train_condition",
    "evaluate_pair_alignment",
    "masking_invariance_stat",
]

_NEG_INF = -1e30


@dataclass
class SslConfig:
    loss: str = "vicreg"               # "infonce" | "vicreg"
    d_out: int = 32
    base_channels: int = 12
    depth: int = 2
    tau: float = 0.1
    alpha: float = 25.0
    beta: float = 25.0
    gamma: float = 1.0
    var_eps: float = 1e-4
    proj_hidden: int = 64
    proj_out: int = 64                 # InfoNCE projector output width
    expansion: int = 8                 # VICReg expander ratio over d_out
    pairs_per_step: int = 4            # m volumes per batch
    positions_per_pair: int = 256      # n positions sampled per pair
    steps: int = 2000
    base_lr: float = 3e-4
    warmup_steps: int = 200
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    seed: int = 0
    masking: bool = False
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    snapshot_every: int = 100
    log_every: int = 25

    def validate(self) -> None:
        if self.loss not in ("infonce", "vicreg"):
            raise ValueError(f"unknown ssl loss {self.loss!r}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not (0.0 <= self.aug.mask_fraction < 1.0):
            raise ValueError(f"mask_fraction must be in [0, 1), got {self.aug.mask_fraction}")
        if self.positions_per_pair > self.aug.min_overlap_voxels:
            raise ValueError("positions_per_pair cannot exceed min_overlap_voxels")


@dataclass
class EncoderCheckpoint:
    """Everything needed to use the encoder or resume its training bit-exactly."""

    kind: str                          # "descriptor" | "condition"
    cfg: SslConfig
    state: dict[str, np.ndarray]
    projector_state: dict[str, np.ndarray]
    opt_state: dict
    rng_state: dict
    step: int
    history: list[tuple[int, float, float]]   # (step, loss, lr)
    diverged: bool = False


# -- losses ---------------------------------------------------------------------


def _check_normalized(z: Tensor, name: str) -> None:
    norms = np.linalg.norm(z.data, axis=1)
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > 1e-6:
        raise ValueError(f"{name} rows must be L2-normalized (max deviation {worst:.2e})")


def infonce_loss(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """Contrastive objective over N positive pairs, summed over all 2N anchors.

    For anchor (i, k) the denominator holds the positive similarity plus the
    2(N-1) similarities to both views of every other pair; same-pair anchors
    never repel each other.
    """
    if z1.shape != z2.shape:
        raise ad.ShapeError(f"view embeddings differ in shape: {z1.shape} vs {z2.shape}")
    _check_normalized(z1, "z1")
    _check_normalized(z2, "z2")
    n = z1.shape[0]
    sim12 = ad.matmul(z1, z2.T) * (1.0 / tau)
    sim11 = ad.matmul(z1, z1.T) * (1.0 / tau)
    sim22 = ad.matmul(z2, z2.T) * (1.0 / tau)
    eye = np.eye(n, dtype=z1.dtype)
    off = Tensor((_NEG_INF * eye).astype(z1.dtype))  # additive mask removing the diagonal
    pos = (sim12 * Tensor(eye)).sum(axis=1)

    def row_lse(full: Tensor, offdiag: Tensor) -> Tensor:
        m_np = np.maximum(full.data.max(axis=1), (offdiag.data + off.data).max(axis=1))
        m = Tensor(m_np[:, None])
        s = (full - m).exp().sum(axis=1) + ((offdiag + off) - m).exp().sum(axis=1)
        return s.log() + m.reshape(n)

    loss1 = row_lse(sim12, sim11) - pos
    loss2 = row_lse(sim12.T, sim22) - pos
    return loss1.sum() + loss2.sum()


def vicreg_loss(z1: Tensor, z2: Tensor, alpha: float, beta: float, gamma: float, eps: float) -> Tensor:
    """Invariance + variance-hinge + covariance objective on unnormalized embeddings."""
    if z1.shape != z2.shape:
        raise ad.ShapeError(f"view embeddings differ in shape: {z1.shape} vs {z2.shape}")
    n, d = z1.shape
    if n < 2:
        raise ValueError(f"vicreg_loss needs N >= 2 for covariance, got N={n}")
    diff = z1 - z2
    inv = (diff * diff).sum() * (1.0 / (n * d))

    var_term = None
    cov_term = None
    for z in (z1, z2):
        zc = z - z.mean(axis=0, keepdims=True)
        var = (zc * zc).sum(axis=0) * (1.0 / (n - 1))
        std = (var + eps).sqrt()
        hinge = (1.0 - std).relu().sum() * (1.0 / d)
        cmat = ad.matmul(zc.T, zc) * (1.0 / (n - 1))
        offdiag_sq = (cmat * cmat).sum() - (var * var).sum()
        cov = offdiag_sq * (1.0 / d)
        var_term = hinge if var_term is None else var_term + hinge
        cov_term = cov if cov_term is None else cov_term + cov
    return inv * alpha + var_term * beta + cov_term * gamma


# -- model construction -------------------------------------------------------------


def build_encoder(cfg: SslConfig, rng: np.random.Generator, dtype=np.float32) -> nn.UNet3d:
    return nn.UNet3d(1, cfg.d_out, base_channels=cfg.base_channels, depth=cfg.depth, rng=rng, dtype=dtype)


def load_encoder(ckpt: EncoderCheckpoint) -> nn.UNet3d:
    model = build_encoder(ckpt.cfg, np.random.default_rng(0))
    model.load_state_dict(ckpt.state)
    return model


def _build_projector(cfg: SslConfig, rng: np.random.Generator, dtype=np.float32) -> nn.MLP:
    if cfg.loss == "infonce":
        return nn.MLP([cfg.d_out, cfg.proj_hidden, cfg.proj_out], rng=rng, dtype=dtype, name="proj")
    wide = cfg.d_out * cfg.expansion
    return nn.MLP([cfg.d_out, wide, wide], rng=rng, dtype=dtype, name="expander")


def _l2_normalize(z: Tensor) -> Tensor:
    sq = (z * z).sum(axis=1, keepdims=True)
    return z * ((sq + 1e-12) ** -0.5)


# -- training loop -----------------------------------------------------------------


def _assemble_batch(volumes, cfg: SslConfig, rng: np.random.Generator):
    """Sample m crop pairs, augment, and collect per-view gather indices."""
    m = cfg.pairs_per_step
    n = cfg.positions_per_pair
    chosen = rng.choice(len(volumes), size=m, replace=len(volumes) < m)
    views = []
    b1, b2 = [], []
    coords1, coords2 = [], []
    for k, vi in enumerate(chosen):
        pair = sample_crop_pair(volumes[int(vi)], cfg.aug, rng)
        corrs = map_correspondences(pair, n, rng)
        v1 = intensity_jitter(pair.view1, cfg.aug, rng)
        v2 = intensity_jitter(pair.view2, cfg.aug, rng)
        if cfg.masking:
            v1, _ = random_mask(v1, cfg.aug, rng)
            v2, _ = random_mask(v2, cfg.aug, rng)
        views.extend([v1, v2])
        b1.extend([2 * k] * n)
        b2.extend([2 * k + 1] * n)
        coords1.extend(c.p1 for c in corrs)
        coords2.extend(c.p2 for c in corrs)
    x = np.stack(views)[:, None].astype(np.float32)
    c1 = np.asarray(coords1, dtype=np.intp)
    c2 = np.asarray(coords2, dtype=np.intp)
    return x, (np.asarray(b1), c1[:, 0], c1[:, 1], c1[:, 2]), (np.asarray(b2), c2[:, 0], c2[:, 1], c2[:, 2])


def _ssl_objective(cfg: SslConfig, projector: nn.MLP, z1: Tensor, z2: Tensor) -> Tensor:
    if cfg.loss == "infonce":
        p1 = _l2_normalize(projector(z1))
        p2 = _l2_normalize(projector(z2))
        return infonce_loss(p1, p2, cfg.tau)
    e1 = projector(z1)
    e2 = projector(z2)
    return vicreg_loss(e1, e2, cfg.alpha, cfg.beta, cfg.gamma, cfg.var_eps)


def _train_dense_ssl(volumes: list[Volume], cfg: SslConfig, kind: str,
                     resume: EncoderCheckpoint | None = None,
                     until_step: int | None = None) -> EncoderCheckpoint:
    cfg.validate()
    if not volumes:
        raise ValueError("need at least one training volume")
    # rng streams are keyed by seed only: condition training with zero masking
    # must reduce byte-for-byte to descriptor training
    init_rng = np.random.default_rng([cfg.seed, 7])
    model = build_encoder(cfg, init_rng)
    projector = _build_projector(cfg, init_rng)
    named = list(model.named_parameters()) + [
        (f"projector.{k}", p) for k, p in projector.named_parameters()
    ]
    opt = AdamW(named, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    sched = ScheduleConfig(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps, total_steps=cfg.steps)
    rng = np.random.default_rng([cfg.seed, 11])
    history: list[tuple[int, float, float]] = []
    start_step = 0
    if resume is not None:
        model.load_state_dict(resume.state)
        projector.load_state_dict(resume.projector_state)
        opt.load_state_dict(resume.opt_state)
        rng.bit_generator.state = resume.rng_state
        history = list(resume.history)
        start_step = resume.step

    stop = min(cfg.steps, until_step) if until_step is not None else cfg.steps
    snapshot = (model.state_dict(), projector.state_dict(), opt.state_dict(),
                rng.bit_generator.state, start_step)
    diverged = False
    step = start_step
    for step in range(start_step + 1, stop + 1):
        lr = lr_schedule(step, sched)
        x, idx1, idx2 = _assemble_batch(volumes, cfg, rng)
        n_rows = len(idx1[0])
        merged = tuple(np.concatenate([a, b]) for a, b in zip(idx1, idx2))
        rows = model(Tensor(x), positions=merged)
        z1 = rows[:n_rows]
        z2 = rows[n_rows:]
        loss = _ssl_objective(cfg, projector, z1, z2)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            model.load_state_dict(snapshot[0])
            projector.load_state_dict(snapshot[1])
            opt.load_state_dict(snapshot[2])
            rng.bit_generator.state = snapshot[3]
            step = snapshot[4]
            diverged = True
            break
        opt.zero_grad()
        loss.backward()
        nn.clip_grad_norm([p for _, p in named], cfg.clip_norm)
        opt.step(lr)
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            history.append((step, loss_val, lr))
        if step % cfg.snapshot_every == 0:
            snapshot = (model.state_dict(), projector.state_dict(), opt.state_dict(),
                        rng.bit_generator.state, step)
    return EncoderCheckpoint(
        kind=kind,
        cfg=cfg,
        state=model.state_dict(),
        projector_state=projector.state_dict(),
        opt_state=opt.state_dict(),
        rng_state=rng.bit_generator.state,
        step=step,
        history=history,
        diverged=diverged,
    )


def train_descriptor(volumes: list[Volume], cfg: SslConfig,
                     resume: EncoderCheckpoint | None = None,
                     until_step: int | None = None) -> EncoderCheckpoint:
    """Train the dense descriptor encoder on unlabeled volumes."""
    cfg = replace(cfg, masking=False)
    return _train_dense_ssl(volumes, cfg, "descriptor", resume=resume, until_step=until_step)


def train_condition(volumes: list[Volume], cfg: SslConfig,
                    resume: EncoderCheckpoint | None = None,
                    until_step: int | None = None) -> EncoderCheckpoint:
    """Same recipe as the descriptor; random masking makes embeddings context-predictable."""
    cfg = replace(cfg, masking=cfg.aug.mask_fraction > 0.0)
    return _train_dense_ssl(volumes, cfg, "condition", resume=resume, until_step=until_step)


# -- post-training statistics ----------------------------------------------------------


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12
    return num / den


def evaluate_pair_alignment(model: nn.UNet3d, volumes, cfg: SslConfig,
                            rng: np.random.Generator, batches: int = 8):
    """Mean cosine of positive descriptor pairs vs shuffled (random) pairs."""
    pos_sims, rand_sims = [], []
    with ad.no_grad():
        for _ in range(batches):
            x, idx1, idx2 = _assemble_batch(volumes, cfg, rng)
            fmap = model(Tensor(x))
            z1 = ad.take_positions(fmap, *idx1).data
            z2 = ad.take_positions(fmap, *idx2).data
            pos_sims.append(_cosine_rows(z1, z2))
            perm = rng.permutation(len(z2))
            rand_sims.append(_cosine_rows(z1, z2[perm]))
    return float(np.mean(np.concatenate(pos_sims))), float(np.mean(np.concatenate(rand_sims)))


def masking_invariance_stat(model: nn.UNet3d, volumes, cfg: SslConfig,
                            rng: np.random.Generator, batches: int = 8) -> float:
    """Mean cosine between embeddings of masked voxels and their clean counterparts."""
    mask_cfg = cfg.aug if cfg.aug.mask_fraction > 0 else replace(cfg.aug, mask_fraction=0.3)
    sims = []
    with ad.no_grad():
        for _ in range(batches):
            vol = volumes[int(rng.integers(0, len(volumes)))]
            pair = sample_crop_pair(vol, cfg.aug, rng)
            clean = pair.view1
            masked, mask = random_mask(clean, mask_cfg, rng)
            if not mask.any():
                continue
            x = np.stack([clean, masked])[:, None].astype(np.float32)
            fmap = model(Tensor(x)).data
            zz, yy, xx = np.nonzero(mask)
            take = rng.choice(len(zz), size=min(256, len(zz)), replace=False)
            a = fmap[0][:, zz[take], yy[take], xx[take]].T
            b = fmap[1][:, zz[take], yy[take], xx[take]].T
            sims.append(_cosine_rows(a, b))
    return float(np.mean(np.concatenate(sims)))
