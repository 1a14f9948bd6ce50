"""Evaluation protocol: voxel-sampled AUROC, Dice score, and threshold calibration.

AUROC is estimated from per-volume samples of pathological and out-of-mask
voxels, pooled across the whole test set before ranking (never averaged over
per-volume AUROCs). Ranks are tie-aware, since pooled NLL maps are quantized
by the pooling grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EvalSample",
    "Metrics",
    "sample_eval_voxels",
    "rank_average",
    "auroc",
    "dice_score",
    "select_threshold",
    "evaluate_dataset",
    "metrics_csv",
    "format_metrics_table",
]


@dataclass
class EvalSample:
    volume_id: str
    pos_scores: np.ndarray   # scores at sampled mask==1 voxels
    neg_scores: np.ndarray   # scores at sampled mask==0 voxels


@dataclass
class Metrics:
    auroc: float
    dice_mean: float
    dice_std: float
    threshold: float
    per_volume: list[dict]   # volume_id, dice, n_pos, n_neg


def sample_eval_voxels(mask: np.ndarray, scores: np.ndarray, k: int,
                       rng: np.random.Generator, volume_id: str = "") -> EvalSample | None:
    """Uniform without-replacement sample of k pathological and k normal voxel scores.

    Volumes without a single positive voxel are skipped (returns None with a
    warning). When fewer than k positives exist, all of them are taken.
    """
    if mask.shape != scores.shape:
        raise ValueError(f"mask shape {mask.shape} does not match scores shape {scores.shape}")
    pos_idx = np.flatnonzero(mask.ravel() != 0)
    neg_idx = np.flatnonzero(mask.ravel() == 0)
    if pos_idx.size == 0:
        warnings.warn(f"volume {volume_id!r} has no positive voxels; skipped")
        return None
    flat = scores.ravel()
    take_pos = pos_idx if pos_idx.size <= k else rng.choice(pos_idx, size=k, replace=False)
    take_neg = neg_idx if neg_idx.size <= k else rng.choice(neg_idx, size=k, replace=False)
    return EvalSample(volume_id=volume_id, pos_scores=flat[take_pos], neg_scores=flat[take_neg])


def rank_average(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Mann-Whitney estimator P(pos > neg) + 0.5 P(pos = neg) over pooled samples."""
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise ValueError("auroc needs at least one positive and one negative score")
    ranks = rank_average(np.concatenate([pos_scores, neg_scores]))
    n_pos = pos_scores.size
    n_neg = neg_scores.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect 1.0."""
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    for name, m in (("pred_mask", pred_mask), ("gt_mask", gt_mask)):
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"{name} must be binary, found values {vals[:5]}")
    a = float(np.count_nonzero(pred_mask))
    b = float(np.count_nonzero(gt_mask))
    if a + b == 0:
        return 1.0
    inter = float(np.count_nonzero((pred_mask != 0) & (gt_mask != 0)))
    return 2.0 * inter / (a + b)


def select_threshold(score_maps: list[np.ndarray], masks: list[np.ndarray],
                     grid_size: int = 64, q_lo: float = 0.5, q_hi: float = 0.9999) -> float:
    """Grid threshold maximizing mean Dice on a calibration split.

    The grid spans quantiles of the pooled calibration scores, so any monotone
    transform of the scores maps the selected threshold through the transform.
    """
    if not score_maps:
        raise ValueError("need at least one calibration volume")
    if not any(m.any() for m in masks):
        raise ValueError("calibration split has no positive voxels")
    pooled = np.concatenate([s.ravel() for s in score_maps])
    grid = np.quantile(pooled, np.linspace(q_lo, q_hi, grid_size))
    grid = np.unique(grid)
    best_t = grid[0]
    best_dice = -1.0
    for t in grid:
        dices = [dice_score((s > t).astype(np.uint8), m.astype(np.uint8))
                 for s, m in zip(score_maps, masks)]
        mean = float(np.mean(dices))
        if mean > best_dice:
            best_dice = mean
            best_t = t
    return float(best_t)


def evaluate_dataset(score_maps: list[np.ndarray], masks: list[np.ndarray],
                     volume_ids: list[str], k: int, rng: np.random.Generator,
                     threshold: float) -> Metrics:
    """Pooled AUROC over sampled voxels plus per-volume Dice at a fixed threshold."""
    samples = []
    per_volume = []
    for scores, mask, vid in zip(score_maps, masks, volume_ids):
        s = sample_eval_voxels(mask, scores, k, rng, volume_id=vid)
        dice = dice_score((scores > threshold).astype(np.uint8), (mask != 0).astype(np.uint8))
        per_volume.append({
            "volume_id": vid,
            "dice": dice,
            "n_pos": int(np.count_nonzero(mask)),
            "n_neg": int(mask.size - np.count_nonzero(mask)),
        })
        if s is not None:
            samples.append(s)
    if not samples:
        raise ValueError("no volume contributed evaluation samples")
    pos = np.concatenate([s.pos_scores for s in samples])
    neg = np.concatenate([s.neg_scores for s in samples])
    dices = [pv["dice"] for pv in per_volume]
    return Metrics(
        auroc=auroc(pos, neg),
        dice_mean=float(np.mean(dices)),
        dice_std=float(np.std(dices)),
        threshold=float(threshold),
        per_volume=per_volume,
    )


def metrics_csv(metrics: Metrics) -> str:
    lines = ["volume_id,auroc_pooled,dice,threshold"]
    for pv in metrics.per_volume:
        lines.append(f"{pv['volume_id']},{metrics.auroc:.6f},{pv['dice']:.6f},{metrics.threshold:.6g}")
    return "\n".join(lines) + "\n"


def format_metrics_table(rows: list[tuple[str, Metrics]]) -> str:
    """Human-readable comparison table: one row per model variant."""
    out = [f"{'model':<32} {'AUROC':>8}   {'Dice (mean ± std)':>20}"]
    for name, m in rows:
        out.append(f"{name:<32} {m.auroc:>8.4f}   {m.dice_mean:>10.4f} ± {m.dice_std:.4f}")
    return "\n".join(out) + "\n"
