"""Typed configuration tree with strict TOML parsing and snapshot emission.

Every hyperparameter used by the data generator, trainers, pipeline, and
evaluation lives here with desk-scale defaults. Unknown keys are rejected at
load time and values are validated against module preconditions. ``run.seed``
is the master seed: per-stage seeds are derived from it when a config is
resolved, and the resolved snapshot is what run directories record.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .density import DensityTrainConfig
from .pipeline import DistillConfig, FinetuneConfig
from .ssl import SslConfig
from .synth import GenConfig
from .views import AugmentConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "DataConfig",
    "PipelineConfig",
    "EvalConfig",
    "Config",
    "default_config",
    "load_config",
    "loads_config",
    "config_to_toml",
    "save_config",
    "resolve_config",
    "validate_config",
]


class ConfigError(ValueError):
    """Unknown keys or precondition violations in a config file."""


@dataclass
class RunConfig:
    seed: int = 0


@dataclass
class DataConfig:
    n_train: int = 40
    n_label: int = 5     # annotated volumes for threshold calibration / fine-tuning
    n_test: int = 10
    gen: GenConfig = field(default_factory=GenConfig)


@dataclass
class PipelineConfig:
    infer_stride: tuple[int, int, int] = (16, 16, 16)
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)


@dataclass
class EvalConfig:
    samples_per_volume: int = 200
    threshold_grid: int = 64
    q_lo: float = 0.5
    q_hi: float = 0.9999


@dataclass
class Config:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    descriptor: SslConfig = field(default_factory=SslConfig)
    condition: SslConfig = field(default_factory=SslConfig)
    density: DensityTrainConfig = field(default_factory=DensityTrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def default_config() -> Config:
    cfg = Config()
    cfg.condition = dataclasses.replace(
        cfg.condition,
        d_out=24,
        aug=dataclasses.replace(cfg.condition.aug, mask_block=8, mask_fraction=0.3),
    )
    return cfg


# -- strict merge -----------------------------------------------------------------


def _coerce(cur, val, path: str):
    if isinstance(cur, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{path}: expected a boolean, got {val!r}")
        return val
    if isinstance(cur, int) and not isinstance(cur, bool):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{path}: expected an integer, got {val!r}")
        return val
    if isinstance(cur, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {val!r}")
        return float(val)
    if isinstance(cur, str):
        if not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string, got {val!r}")
        return val
    if isinstance(cur, tuple):
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{path}: expected an array, got {val!r}")
        return tuple(val)
    raise ConfigError(f"{path}: unsupported value {val!r}")


def _merged(obj, updates: dict, path: str):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(updates) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for key, val in updates.items():
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}{key}: expected a table")
            kwargs[key] = _merged(cur, val, f"{path}{key}.")
        elif isinstance(val, dict):
            raise ConfigError(f"{path}{key}: did not expect a table")
        else:
            kwargs[key] = _coerce(cur, val, f"{path}{key}")
    try:
        return dataclasses.replace(obj, **kwargs)
    except ValueError as e:
        raise ConfigError(f"{path.rstrip('.') or 'config'}: {e}") from None


def loads_config(text: str) -> Config:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"TOML parse error: {e}") from None
    cfg = _merged(default_config(), raw, "")
    validate_config(cfg)
    return cfg


def load_config(path: str) -> Config:
    with open(path, "r", encoding="utf-8") as f:
        return loads_config(f.read())


def validate_config(cfg: Config) -> None:
    try:
        cfg.descriptor.validate()
        cfg.condition.validate()
        cfg.density.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.data.n_train < 1 or cfg.data.n_test < 1 or cfg.data.n_label < 1:
        raise ConfigError("data.n_train, data.n_label, data.n_test must all be >= 1")
    if cfg.eval.samples_per_volume < 1:
        raise ConfigError("eval.samples_per_volume must be >= 1")
    if not (0.0 <= cfg.eval.q_lo < cfg.eval.q_hi <= 1.0):
        raise ConfigError("eval quantile range must satisfy 0 <= q_lo < q_hi <= 1")
    for s, p in zip(cfg.pipeline.infer_stride, cfg.density.patch):
        if s < 1 or s > p:
            raise ConfigError(f"pipeline.infer_stride {cfg.pipeline.infer_stride} must be in [1, patch]")
    for p, q in zip(cfg.density.patch, cfg.density.pool):
        if p % q != 0:
            raise ConfigError(f"density.patch {cfg.density.patch} must be divisible by pool {cfg.density.pool}")
    for e, p in zip(cfg.data.gen.extents, cfg.density.patch):
        if e < p:
            raise ConfigError(f"volume extents {cfg.data.gen.extents} smaller than density patch")


_STAGE_OFFSETS = {
    "data": 1,
    "descriptor": 2,
    "condition": 3,
    "density": 4,
    "distill": 5,
    "finetune": 6,
    "eval": 7,
}


def stage_seed(base: int, stage: str) -> int:
    return base * 1000 + _STAGE_OFFSETS[stage]


def resolve_config(cfg: Config) -> Config:
    """Derive all per-stage seeds from run.seed (the snapshot of record)."""
    base = cfg.run.seed
    out = Config(
        run=dataclasses.replace(cfg.run),
        data=dataclasses.replace(cfg.data, gen=dataclasses.replace(cfg.data.gen, seed=stage_seed(base, "data"))),
        descriptor=dataclasses.replace(cfg.descriptor, seed=stage_seed(base, "descriptor")),
        condition=dataclasses.replace(cfg.condition, seed=stage_seed(base, "condition")),
        density=dataclasses.replace(cfg.density, seed=stage_seed(base, "density")),
        pipeline=PipelineConfig(
            infer_stride=cfg.pipeline.infer_stride,
            distill=dataclasses.replace(cfg.pipeline.distill, seed=stage_seed(base, "distill")),
            finetune=dataclasses.replace(cfg.pipeline.finetune, seed=stage_seed(base, "finetune")),
        ),
        eval=dataclasses.replace(cfg.eval),
    )
    return out


# -- emission ----------------------------------------------------------------------


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        out = repr(v)
        return out if ("." in out or "e" in out or "inf" in out or "nan" in out) else out + ".0"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise TypeError(f"cannot emit {type(v).__name__} into TOML")


def _emit_section(obj, name: str, lines: list[str]) -> None:
    scalars = []
    subsections = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            subsections.append((f.name, v))
        else:
            scalars.append((f.name, v))
    if scalars or not subsections:
        lines.append(f"[{name}]")
        for key, v in scalars:
            lines.append(f"{key} = {_fmt_value(v)}")
        lines.append("")
    for key, v in subsections:
        _emit_section(v, f"{name}.{key}", lines)


def config_to_toml(cfg: Config) -> str:
    lines: list[str] = []
    for f in dataclasses.fields(cfg):
        _emit_section(getattr(cfg, f.name), f.name, lines)
    return "\n".join(lines)


def save_config(cfg: Config, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_to_toml(cfg))
