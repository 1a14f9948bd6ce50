"""Command-line entry points.

Every command takes a TOML config plus paths, writes its artifacts under a run
directory together with a resolved config snapshot, and exits 0 on success,
2 on usage errors, 3 on config/validation errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import Config, ConfigError, load_config, resolve_config, save_config, stage_seed
from .density import DensityTrainConfig, fit_density
from .metrics import evaluate_dataset, format_metrics_table, metrics_csv, select_threshold
from .pipeline import (
    BundleError,
    finetune_segmentation,
    distill,
    infer_anomaly_map,
    load_bundle,
    predict_probability_map,
)
from .ssl import train_condition, train_descriptor
from .synth import AnnotatedVolume, Volume, gen_dataset, gen_normal_volume, inject_anomalies
from .volio import FormatError, config_digest, load_checkpoint, load_volume, save_checkpoint, save_volume

__all__ = ["main"]


def _log(msg: str) -> None:
    print(f"[voxanom] {msg}", file=sys.stderr)


def _write_history_csv(path: str, history) -> None:
    lines = ["step,loss,lr"] + [f"{s},{l:.8g},{r:.8g}" for s, l, r in history]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _snapshot(cfg: Config, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.toml"))


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else resolve_config(Config())
    return resolve_config(cfg)


# -- data splits -------------------------------------------------------------------


def _split_dir(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, split)


def _volume_paths(data_dir: str, split: str) -> list[str]:
    d = _split_dir(data_dir, split)
    if not os.path.isdir(d):
        raise FileNotFoundError(f"missing data split directory {d}")
    return sorted(
        os.path.join(d, f) for f in os.listdir(d) if f.endswith(".svol") and ".mask" not in f
    )


def _load_volumes(data_dir: str, split: str, spacing) -> list[Volume]:
    vols = []
    for path in _volume_paths(data_dir, split):
        vid = os.path.basename(path)[: -len(".svol")]
        vols.append(Volume(load_volume(path), tuple(spacing), vid))
    return vols


def _load_annotated(data_dir: str, split: str, spacing) -> list[AnnotatedVolume]:
    out = []
    for vol in _load_volumes(data_dir, split, spacing):
        mask_path = os.path.join(_split_dir(data_dir, split), f"{vol.id}.mask.svol")
        out.append(AnnotatedVolume(vol, load_volume(mask_path)))
    return out


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    _snapshot(cfg, args.out)
    gen = cfg.data.gen
    train, test = gen_dataset(gen, cfg.data.n_train, cfg.data.n_test)
    for vol in train:
        save_volume(os.path.join(args.out, "train", f"{vol.id}.svol"), vol.data)
    for ann in test:
        base = os.path.join(args.out, "test", ann.volume.id)
        save_volume(base + ".svol", ann.volume.data)
        save_volume(base + ".mask.svol", ann.anomaly_mask.astype(np.uint8))
    for i in range(cfg.data.n_label):
        ann = inject_anomalies(gen_normal_volume(gen, i, role="label"), gen)
        base = os.path.join(args.out, "label", ann.volume.id)
        save_volume(base + ".svol", ann.volume.data)
        save_volume(base + ".mask.svol", ann.anomaly_mask.astype(np.uint8))
    _log(f"wrote {cfg.data.n_train} train / {cfg.data.n_label} label / {cfg.data.n_test} test volumes to {args.out}")
    return 0


def cmd_train_descriptor(args) -> int:
    cfg = _load_cfg(args)
    _snapshot(cfg, args.out)
    volumes = _load_volumes(args.data, "train", cfg.data.gen.spacing)
    ckpt = train_descriptor(volumes, cfg.descriptor)
    save_checkpoint(os.path.join(args.out, "descriptor.sckp"), ckpt, config_digest(cfg.descriptor))
    _write_history_csv(os.path.join(args.out, "descriptor_curve.csv"), ckpt.history)
    _log(f"descriptor trained for {ckpt.step} steps (diverged={ckpt.diverged})")
    return 0


def cmd_train_condition(args) -> int:
    cfg = _load_cfg(args)
    _snapshot(cfg, args.out)
    volumes = _load_volumes(args.data, "train", cfg.data.gen.spacing)
    ckpt = train_condition(volumes, cfg.condition)
    save_checkpoint(os.path.join(args.out, "condition.sckp"), ckpt, config_digest(cfg.condition))
    _write_history_csv(os.path.join(args.out, "condition_curve.csv"), ckpt.history)
    _log(f"condition model trained for {ckpt.step} steps (diverged={ckpt.diverged})")
    return 0


def _density_cfg(cfg: Config, args) -> DensityTrainConfig:
    import dataclasses

    kind = args.kind or cfg.density.kind
    condition = args.condition or cfg.density.condition
    return dataclasses.replace(cfg.density, kind=kind, condition=condition)


def cmd_train_density(args) -> int:
    cfg = _load_cfg(args)
    _snapshot(cfg, args.out)
    dens_cfg = _density_cfg(cfg, args)
    dens_cfg.validate()
    volumes = _load_volumes(args.data, "train", cfg.data.gen.spacing)
    desc = load_checkpoint(args.descriptor)
    cond = load_checkpoint(args.condition_model) if args.condition_model else None
    ckpt = fit_density(desc, cond, volumes, dens_cfg)
    name = f"density_{dens_cfg.kind}_{dens_cfg.condition}.sckp"
    save_checkpoint(os.path.join(args.out, name), ckpt, config_digest(dens_cfg))
    _write_history_csv(os.path.join(args.out, name.replace(".sckp", "_curve.csv")), ckpt.history)
    _log(f"density model ({dens_cfg.kind}, condition={dens_cfg.condition}) fitted: {name}")
    return 0


def _build_bundle(args):
    desc = load_checkpoint(args.descriptor)
    cond = load_checkpoint(args.condition_model) if args.condition_model else None
    dens = load_checkpoint(args.density)
    return load_bundle(desc, cond, dens)


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    _snapshot(cfg, args.out)
    bundle = _build_bundle(args)
    stride = tuple(cfg.pipeline.infer_stride)
    splits = [s for s in ("label", "test") if os.path.isdir(_split_dir(args.data, s))]
    total = 0
    for split in splits:
        for vol in _load_volumes(args.data, split, cfg.data.gen.spacing):
            amap = infer_anomaly_map(vol, bundle, stride=stride)
            save_volume(os.path.join(args.out, "maps", split, f"{vol.id}.svol"), amap.scores)
            total += 1
    _log(f"wrote {total} anomaly maps under {os.path.join(args.out, 'maps')}")
    return 0


def cmd_export_maps(args) -> int:
    names = sorted(f for f in os.listdir(args.maps) if f.endswith(".svol"))
    if not names:
        raise FileNotFoundError(f"no .svol maps under {args.maps}")
    os.makedirs(args.out, exist_ok=True)
    for f in names:
        scores = load_volume(os.path.join(args.maps, f))
        save_volume(os.path.join(args.out, f), scores.astype(np.float32))
    _log(f"exported {len(names)} score volumes to {args.out}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    _snapshot(cfg, args.out)
    bundle = _build_bundle(args)
    volumes = _load_volumes(args.data, "train", cfg.data.gen.spacing)
    arch = (cfg.descriptor.base_channels, cfg.descriptor.depth)
    ckpt = distill(bundle, arch, volumes, cfg.pipeline.distill)
    save_checkpoint(os.path.join(args.out, "distilled.sckp"), ckpt, config_digest(cfg.pipeline.distill))
    _write_history_csv(os.path.join(args.out, "distilled_curve.csv"), ckpt.history)
    _log(f"distilled student trained for {ckpt.step} steps (diverged={ckpt.diverged})")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    _snapshot(cfg, args.out)
    student = load_checkpoint(args.distilled)
    labeled = _load_annotated(args.data, "label", cfg.data.gen.spacing)
    ckpt = finetune_segmentation(student, labeled, cfg.pipeline.finetune)
    save_checkpoint(os.path.join(args.out, "finetuned.sckp"), ckpt, config_digest(cfg.pipeline.finetune))
    _write_history_csv(os.path.join(args.out, "finetuned_curve.csv"), ckpt.history)
    _log(f"fine-tuned segmentation head for {ckpt.step} steps (diverged={ckpt.diverged})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    _snapshot(cfg, args.out)
    cal = _load_annotated(args.data, "label", cfg.data.gen.spacing)
    test = _load_annotated(args.data, "test", cfg.data.gen.spacing)
    cal_maps = [load_volume(os.path.join(args.maps, "label", f"{a.volume.id}.svol")) for a in cal]
    test_maps = [load_volume(os.path.join(args.maps, "test", f"{a.volume.id}.svol")) for a in test]
    threshold = select_threshold(cal_maps, [a.anomaly_mask for a in cal],
                                 grid_size=cfg.eval.threshold_grid, q_lo=cfg.eval.q_lo, q_hi=cfg.eval.q_hi)
    rng = np.random.default_rng([stage_seed(cfg.run.seed, "eval"), 3])
    metrics = evaluate_dataset(test_maps, [a.anomaly_mask for a in test], [a.volume.id for a in test],
                               k=cfg.eval.samples_per_volume, rng=rng, threshold=threshold)
    csv = metrics_csv(metrics)
    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write(csv)
    table = format_metrics_table([("anomaly-map", metrics)])
    with open(os.path.join(args.out, "metrics.txt"), "w") as f:
        f.write(table)
    # threshold calibration is this artifact's convention; the paper does not state one
    _log(f"threshold {threshold:.4f} selected on the label split ({len(cal)} volumes)")
    _log(f"pooled AUROC {metrics.auroc:.4f}, Dice {metrics.dice_mean:.4f} ± {metrics.dice_std:.4f}")
    print(table, end="")
    return 0


def _add_common(p, data: bool = True) -> None:
    p.add_argument("--config", help="TOML config (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="run directory for artifacts")
    if data:
        p.add_argument("--data", required=True, help="dataset directory from gen-data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxanom",
                                     description="Self-supervised density-based anomaly segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset splits")
    _add_common(p, data=False)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-descriptor", help="train the dense descriptor encoder")
    _add_common(p)
    p.set_defaults(fn=cmd_train_descriptor)

    p = sub.add_parser("train-condition", help="train the masking-invariant condition encoder")
    _add_common(p)
    p.set_defaults(fn=cmd_train_condition)

    p = sub.add_parser("train-density", help="fit a density model on frozen features")
    _add_common(p)
    p.add_argument("--descriptor", required=True)
    p.add_argument("--condition-model", help="condition encoder checkpoint (learned conditions)")
    p.add_argument("--kind", choices=["gaussian", "flow"], help="override config density.kind")
    p.add_argument("--condition", choices=["none", "sincos", "learned"],
                   help="override config density.condition")
    p.set_defaults(fn=cmd_train_density)

    p = sub.add_parser("infer", help="anomaly maps for the label and test splits")
    _add_common(p)
    p.add_argument("--descriptor", required=True)
    p.add_argument("--condition-model")
    p.add_argument("--density", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("distill", help="distill the pipeline into a single network")
    _add_common(p)
    p.add_argument("--descriptor", required=True)
    p.add_argument("--condition-model")
    p.add_argument("--density", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("finetune", help="supervised fine-tuning of the distilled network")
    _add_common(p)
    p.add_argument("--distilled", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="AUROC/Dice metrics from anomaly maps")
    _add_common(p)
    p.add_argument("--maps", required=True, help="maps directory produced by infer")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-maps", help="re-encode anomaly maps for external tools")
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_maps)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, BundleError, FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
