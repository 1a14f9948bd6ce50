"""End-to-end experiment driver: data, SSL encoders, density variants, metrics.

All density variants share one frozen descriptor/condition pair, one feature
cache for fitting, and one per-patch feature pass at inference, so ablations
cost little more than a single pipeline run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import Config, resolve_config
from .density import (
    DensityTrainConfig,
    FeatureCache,
    build_density_model,
    fit_density_on_cache,
    sincos_condition_map,
)
from .metrics import Metrics, evaluate_dataset, select_threshold
from .pipeline import ScoreBundle, distill, finetune_segmentation, \
    predict_probability_map, predict_student_map, tile_volume
from .ssl import evaluate_pair_alignment, load_encoder, masking_invariance_stat, train_condition, \
    train_descriptor
from .synth import AnnotatedVolume, gen_dataset, gen_normal_volume, inject_anomalies

__all__ = ["Variant", "ExperimentResult", "DEFAULT_VARIANTS", "run_experiment"]


@dataclass(frozen=True)
class Variant:
    name: str
    kind: str        # "gaussian" | "flow"
    condition: str   # "none" | "sincos" | "learned"


DEFAULT_VARIANTS = (
    Variant("gaussian_none", "gaussian", "none"),
    Variant("gaussian_sincos", "gaussian", "sincos"),
    Variant("gaussian_learned", "gaussian", "learned"),
    Variant("flow_none", "flow", "none"),
)


@dataclass
class ExperimentResult:
    seed: int
    metrics: dict[str, Metrics] = field(default_factory=dict)
    pair_cosine_pos: float = float("nan")
    pair_cosine_rand: float = float("nan")
    masking_cosine_condition: float = float("nan")
    masking_cosine_descriptor: float = float("nan")
    student_auroc: float = float("nan")
    teacher_auroc: float = float("nan")
    teacher_dice: float = float("nan")
    finetuned_dice: float = float("nan")
    timings: dict[str, float] = field(default_factory=dict)


def _encode_pooled(model, crop: np.ndarray, pool) -> np.ndarray:
    with ad.no_grad():
        return ad.avg_pool3d(model(Tensor(crop[None, None])), pool).data[0]


def _shared_caches(desc_model, cond_model, volumes, dens_cfg: DensityTrainConfig,
                   rng: np.random.Generator) -> dict[str, FeatureCache]:
    """One pass over random crops feeding every condition source."""
    ys, c_learned, c_sincos, vidx = [], [], [], []
    for k in range(dens_cfg.cache_crops):
        vi = k % len(volumes)
        vol = volumes[vi]
        origin = tuple(int(rng.integers(0, e - p + 1)) for e, p in zip(vol.data.shape, dens_cfg.patch))
        crop = vol.data[tuple(slice(o, o + p) for o, p in zip(origin, dens_cfg.patch))].astype(np.float32)
        y = _encode_pooled(desc_model, crop, dens_cfg.pool)
        ys.append(y)
        c_learned.append(_encode_pooled(cond_model, crop, dens_cfg.pool))
        c_sincos.append(sincos_condition_map(origin, y.shape[1:], dens_cfg.pool,
                                             dens_cfg.d_cond_sincos, dens_cfg.sincos_scale))
        vidx.append(vi)
    y_maps = np.stack(ys)
    vidx = np.asarray(vidx)
    return {
        "none": FeatureCache(y_maps, None, vidx),
        "learned": FeatureCache(y_maps, np.stack(c_learned), vidx),
        "sincos": FeatureCache(y_maps, np.stack(c_sincos), vidx),
    }


def _infer_maps_shared(desc_model, cond_model, models: dict[str, tuple[object, str]],
                       annotated: list[AnnotatedVolume], dens_cfg: DensityTrainConfig,
                       stride) -> dict[str, list[np.ndarray]]:
    """Anomaly maps for every density variant with one feature pass per patch."""
    out: dict[str, list[np.ndarray]] = {name: [] for name in models}
    for ann in annotated:
        vol = ann.volume
        grid = tile_volume(vol.data.shape, dens_cfg.patch, stride)
        sums = {name: np.zeros(vol.data.shape, dtype=np.float64) for name in models}
        coverage = np.zeros(vol.data.shape, dtype=np.int32)
        for origin in grid.origins:
            sl = tuple(slice(o, o + p) for o, p in zip(origin, dens_cfg.patch))
            crop = vol.data[sl].astype(np.float32)
            y = _encode_pooled(desc_model, crop, dens_cfg.pool)
            conds = {"none": None}
            if any(src == "learned" for _, src in models.values()):
                conds["learned"] = _encode_pooled(cond_model, crop, dens_cfg.pool)
            if any(src == "sincos" for _, src in models.values()):
                conds["sincos"] = sincos_condition_map(origin, y.shape[1:], dens_cfg.pool,
                                                       dens_cfg.d_cond_sincos, dens_cfg.sincos_scale)
            coverage[sl] += 1
            y_t = Tensor(y[None])
            for name, (model, src) in models.items():
                c = conds[src]
                with ad.no_grad():
                    nll = model.nll_map_tensor(y_t, Tensor(c[None]) if c is not None else None).data[0]
                for axis, f in enumerate(dens_cfg.pool):
                    nll = np.repeat(nll, f, axis=axis)
                sums[name][sl] += nll
        for name in models:
            out[name].append((sums[name] / coverage).astype(np.float32))
    return out


def _variant_metrics(maps_label, maps_test, label, test, eval_cfg, seed) -> Metrics:
    threshold = select_threshold(maps_label, [a.anomaly_mask for a in label],
                                 grid_size=eval_cfg.threshold_grid,
                                 q_lo=eval_cfg.q_lo, q_hi=eval_cfg.q_hi)
    rng = np.random.default_rng([seed, 53])
    return evaluate_dataset(maps_test, [a.anomaly_mask for a in test],
                            [a.volume.id for a in test],
                            k=eval_cfg.samples_per_volume, rng=rng, threshold=threshold)


def run_experiment(cfg: Config, variants=DEFAULT_VARIANTS, with_distill: bool = False,
                   verbose: bool = False) -> ExperimentResult:
    cfg = resolve_config(cfg)
    res = ExperimentResult(seed=cfg.run.seed)
    clock = time.perf_counter
    t0 = clock()

    def note(stage, start):
        res.timings[stage] = clock() - start
        if verbose:
            print(f"  [{stage}] {res.timings[stage]:.1f}s", flush=True)

    t = clock()
    train, test = gen_dataset(cfg.data.gen, cfg.data.n_train, cfg.data.n_test)
    label = [inject_anomalies(gen_normal_volume(cfg.data.gen, i, role="label"), cfg.data.gen)
             for i in range(cfg.data.n_label)]
    note("gen-data", t)

    t = clock()
    desc_ckpt = train_descriptor(train, cfg.descriptor)
    note("train-descriptor", t)
    t = clock()
    cond_ckpt = train_condition(train, cfg.condition)
    note("train-condition", t)
    desc_model = load_encoder(desc_ckpt)
    cond_model = load_encoder(cond_ckpt)

    t = clock()
    stat_rng = np.random.default_rng([cfg.run.seed, 61])
    res.pair_cosine_pos, res.pair_cosine_rand = evaluate_pair_alignment(
        desc_model, [a.volume for a in test[:4]], cfg.descriptor, stat_rng
    )
    res.masking_cosine_condition = masking_invariance_stat(
        cond_model, [a.volume for a in test[:4]], cfg.condition, np.random.default_rng([cfg.run.seed, 67])
    )
    res.masking_cosine_descriptor = masking_invariance_stat(
        desc_model, [a.volume for a in test[:4]], cfg.condition, np.random.default_rng([cfg.run.seed, 67])
    )
    note("encoder-stats", t)

    t = clock()
    cache_rng = np.random.default_rng([cfg.density.seed, 19])
    caches = _shared_caches(desc_model, cond_model, train, cfg.density, cache_rng)
    note("feature-cache", t)

    import dataclasses

    fitted: dict[str, tuple[object, str]] = {}
    for var in variants:
        t = clock()
        dens_cfg = dataclasses.replace(cfg.density, kind=var.kind, condition=var.condition)
        cache = caches[var.condition]
        d_cond = cache.d_cond
        model = build_density_model(var.kind, var.condition, cache.d_desc, d_cond, dens_cfg,
                                    np.random.default_rng([dens_cfg.seed, 29]))
        fit_density_on_cache(model, cache, dens_cfg)
        fitted[var.name] = (model, var.condition)
        note(f"fit-{var.name}", t)

    t = clock()
    stride = tuple(cfg.pipeline.infer_stride)
    maps_label = _infer_maps_shared(desc_model, cond_model, fitted, label, cfg.density, stride)
    maps_test = _infer_maps_shared(desc_model, cond_model, fitted, test, cfg.density, stride)
    note("infer", t)

    t = clock()
    for var in variants:
        res.metrics[var.name] = _variant_metrics(
            maps_label[var.name], maps_test[var.name], label, test, cfg.eval, cfg.run.seed
        )
    note("eval", t)

    if with_distill:
        t = clock()
        teacher_name = "gaussian_learned" if "gaussian_learned" in fitted else variants[0].name
        teacher_model, teacher_src = fitted[teacher_name]
        dens_cfg = dataclasses.replace(cfg.density, kind="gaussian", condition=teacher_src)
        bundle = ScoreBundle(
            desc_model=desc_model, cond_model=cond_model if teacher_src == "learned" else None,
            density_model=teacher_model, density_cfg=dens_cfg, condition=teacher_src,
            d_desc=caches["none"].d_desc, d_cond=caches[teacher_src].d_cond,
        )
        student = distill(bundle, (cfg.descriptor.base_channels, cfg.descriptor.depth),
                          train, cfg.pipeline.distill)
        note("distill", t)
        t = clock()
        student_maps = [predict_student_map(student, a.volume, stride=stride) for a in test]
        student_label_maps = [predict_student_map(student, a.volume, stride=stride) for a in label]
        m_student = _variant_metrics(student_label_maps, student_maps, label, test, cfg.eval, cfg.run.seed)
        res.student_auroc = m_student.auroc
        res.teacher_auroc = res.metrics[teacher_name].auroc
        res.teacher_dice = res.metrics[teacher_name].dice_mean
        note("student-eval", t)

        t = clock()
        tuned = finetune_segmentation(student, label, cfg.pipeline.finetune)
        dices = []
        from .metrics import dice_score

        for a in test:
            probs = predict_probability_map(tuned, a.volume, stride=stride)
            dices.append(dice_score((probs > 0.5).astype(np.uint8), (a.anomaly_mask != 0).astype(np.uint8)))
        res.finetuned_dice = float(np.mean(dices))
        note("finetune", t)

    res.timings["total"] = clock() - t0
    return res
