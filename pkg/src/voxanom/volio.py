"""Bit-exact binary persistence: volumes ("SVOL") and model checkpoints ("SCKP").

Both formats are little-endian and versioned; readers reject newer versions
explicitly. Writes are atomic (temp file + rename). Checkpoints carry a JSON
metadata blob (config, rng state, history, step counter) plus a named f32
tensor table covering model parameters and optimizer moments, which is enough
to resume training bit-identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from typing import Any

import numpy as np

from .density import DensityCheckpoint, DensityTrainConfig
from .pipeline import StudentCheckpoint
from .ssl import EncoderCheckpoint, SslConfig
from .views import AugmentConfig

__all__ = [
    "FormatError",
    "save_volume",
    "load_volume",
    "save_checkpoint",
    "load_checkpoint",
    "config_digest",
]

VOLUME_MAGIC = b"SVOL"
CKPT_MAGIC = b"SCKP"
VOLUME_VERSION = 1
CKPT_VERSION = 1
DTYPE_CODES = {1: np.float32, 2: np.uint8}
DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
KINDS = ("descriptor", "condition", "gaussian", "flow", "distilled", "finetuned")


class FormatError(ValueError):
    """Malformed, truncated, or version-incompatible file."""


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- volumes -----------------------------------------------------------------------


def save_volume(path: str, array: np.ndarray) -> None:
    """Write a 3-D array as SVOL (f32 intensities/scores or u8 masks)."""
    if array.ndim != 3:
        raise ValueError(f"volumes are 3-D, got shape {array.shape}")
    dtype = np.dtype(array.dtype)
    if dtype not in DTYPE_TAGS:
        raise ValueError(f"unsupported volume dtype {dtype}; use float32 or uint8")
    header = VOLUME_MAGIC + struct.pack("<II", VOLUME_VERSION, DTYPE_TAGS[dtype])
    header += struct.pack("<QQQ", *array.shape)
    payload = np.ascontiguousarray(array).astype(dtype.newbyteorder("<")).tobytes(order="C")
    _atomic_write(path, header + payload)


def load_volume(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 36 or blob[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: not an SVOL file")
    version, code = struct.unpack_from("<II", blob, 4)
    if version > VOLUME_VERSION:
        raise FormatError(f"{path}: SVOL version {version} is newer than supported ({VOLUME_VERSION})")
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    extents = struct.unpack_from("<QQQ", blob, 12)
    dtype = np.dtype(DTYPE_CODES[code]).newbyteorder("<")
    expected = int(np.prod(extents)) * dtype.itemsize
    payload = blob[36:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected} (truncated?)")
    return np.frombuffer(payload, dtype=dtype).reshape(extents).astype(DTYPE_CODES[code])


# -- checkpoints --------------------------------------------------------------------


def _cfg_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_digest(cfg_obj) -> bytes:
    """sha256 over the canonical JSON form of any (nested) config dataclass or dict."""
    d = _cfg_to_dict(cfg_obj) if dataclasses.is_dataclass(cfg_obj) else cfg_obj
    return hashlib.sha256(_canonical_json(d)).digest()


def _tuplify(cls, d: dict) -> dict:
    """Json round-trips tuples as lists; restore tuple-typed dataclass fields."""
    out = dict(d)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


def _encoder_meta(ckpt: EncoderCheckpoint) -> dict:
    cfg = _cfg_to_dict(ckpt.cfg)
    return {
        "model": "encoder",
        "cfg": cfg,
        "rng_state": ckpt.rng_state,
        "opt_t": ckpt.opt_state["t"],
        "step": ckpt.step,
        "history": ckpt.history,
        "diverged": ckpt.diverged,
    }


def _tensor_table(ckpt) -> dict[str, np.ndarray]:
    table = {f"model/{k}": v for k, v in ckpt.state.items()}
    if isinstance(ckpt, EncoderCheckpoint):
        table.update({f"projector/{k}": v for k, v in ckpt.projector_state.items()})
        table.update({f"opt/m/{k}": v for k, v in ckpt.opt_state["m"].items()})
        table.update({f"opt/v/{k}": v for k, v in ckpt.opt_state["v"].items()})
    return table


def _checkpoint_parts(ckpt) -> tuple[str, dict, dict[str, np.ndarray]]:
    if isinstance(ckpt, EncoderCheckpoint):
        return ckpt.kind, _encoder_meta(ckpt), _tensor_table(ckpt)
    if isinstance(ckpt, DensityCheckpoint):
        meta = {
            "model": "density",
            "condition": ckpt.condition,
            "d_desc": ckpt.d_desc,
            "d_cond": ckpt.d_cond,
            "cfg": _cfg_to_dict(ckpt.cfg),
            "step": ckpt.step,
            "history": ckpt.history,
            "diverged": ckpt.diverged,
        }
        return ckpt.kind, meta, _tensor_table(ckpt)
    if isinstance(ckpt, StudentCheckpoint):
        meta = {
            "model": "student",
            "base_channels": ckpt.base_channels,
            "depth": ckpt.depth,
            "patch": list(ckpt.patch),
            "step": ckpt.step,
            "history": ckpt.history,
            "diverged": ckpt.diverged,
        }
        return ckpt.kind, meta, _tensor_table(ckpt)
    raise TypeError(f"unknown checkpoint type {type(ckpt).__name__}")


def save_checkpoint(path: str, ckpt, cfg_digest: bytes | None = None) -> None:
    kind, meta, tensors = _checkpoint_parts(ckpt)
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    digest = cfg_digest if cfg_digest is not None else b"\x00" * 32
    meta_blob = _canonical_json(meta)
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    kind_b = kind.encode()
    out.append(struct.pack("<H", len(kind_b)))
    out.append(kind_b)
    out.append(digest)
    out.append(struct.pack("<Q", len(meta_blob)))
    out.append(meta_blob)
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_b = name.encode()
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes(order="C"))
    _atomic_write(path, b"".join(out))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint (wanted {n} bytes at {self.pos})")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_raw(path: str) -> tuple[str, bytes, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not an SCKP checkpoint")
    (version,) = r.unpack("<I")
    if version > CKPT_VERSION:
        raise FormatError(f"{path}: SCKP version {version} is newer than supported ({CKPT_VERSION})")
    (kind_len,) = r.unpack("<H")
    kind = r.take(kind_len).decode()
    digest = r.take(32)
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt metadata block: {e}") from None
    (n_tensors,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    return kind, digest, meta, tensors


def _split_table(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    plen = len(prefix)
    return {k[plen:]: v for k, v in tensors.items() if k.startswith(prefix)}


def _rebuild_ssl_cfg(d: dict) -> SslConfig:
    aug = AugmentConfig(**_tuplify(AugmentConfig, d.pop("aug")))
    return SslConfig(aug=aug, **_tuplify(SslConfig, d))


def load_checkpoint(path: str, expect_digest: bytes | None = None):
    """Load any SCKP checkpoint; returns the matching checkpoint dataclass."""
    kind, digest, meta, tensors = _read_raw(path)
    if kind not in KINDS:
        raise FormatError(f"{path}: unknown checkpoint kind {kind!r}")
    if expect_digest is not None and digest != b"\x00" * 32 and digest != expect_digest:
        import warnings

        warnings.warn(f"{path}: checkpoint config digest does not match the supplied config")
    model = meta.get("model")
    if model == "encoder":
        cfg = _rebuild_ssl_cfg(dict(meta["cfg"]))
        return EncoderCheckpoint(
            kind=kind,
            cfg=cfg,
            state=_split_table(tensors, "model/"),
            projector_state=_split_table(tensors, "projector/"),
            opt_state={
                "t": meta["opt_t"],
                "m": _split_table(tensors, "opt/m/"),
                "v": _split_table(tensors, "opt/v/"),
            },
            rng_state=meta["rng_state"],
            step=meta["step"],
            history=[tuple(h) for h in meta["history"]],
            diverged=meta["diverged"],
        )
    if model == "density":
        cfg = DensityTrainConfig(**_tuplify(DensityTrainConfig, dict(meta["cfg"])))
        return DensityCheckpoint(
            kind=kind,
            condition=meta["condition"],
            d_desc=meta["d_desc"],
            d_cond=meta["d_cond"],
            cfg=cfg,
            state=_split_table(tensors, "model/"),
            history=[tuple(h) for h in meta["history"]],
            step=meta["step"],
            diverged=meta["diverged"],
        )
    if model == "student":
        return StudentCheckpoint(
            kind=kind,
            base_channels=meta["base_channels"],
            depth=meta["depth"],
            patch=tuple(meta["patch"]),
            state=_split_table(tensors, "model/"),
            history=[tuple(h) for h in meta["history"]],
            step=meta["step"],
            diverged=meta["diverged"],
        )
    raise FormatError(f"{path}: unknown model family {model!r}")
