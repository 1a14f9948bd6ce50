"""Dense-tensor algebra with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for numerical
tests). Every differentiable op records its parents and a backward closure;
``backward()`` replays the tape in reverse topological order, visiting each
node exactly once. There are no higher-order gradients.
"""

from __future__ import annotations

import contextlib
from itertools import product
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "matmul",
    "linear",
    "conv3d",
    "avg_pool3d",
    "upsample_nearest3d",
    "take_positions",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible, naming the offending axis."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array plus optional gradient and tape linkage.

    ``data`` is always a numpy array; ``grad`` is populated by ``backward()``
    for tensors with ``requires_grad`` and stays ``None`` for detached or
    unreachable ones.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name: str | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        """Tensor sharing the same data but severed from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff machinery ---------------------------------------------------

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # own=True hands over a freshly allocated array unique to this tensor,
        # letting the first accumulation skip its defensive copy
        if self.grad is None:
            if own and isinstance(g, np.ndarray) and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep seeding d(self)/d(self) = 1.

        The loss must be scalar. Parameters not reachable from the loss keep
        ``grad of None``.
        """
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents and node is not self:
                node.grad = None  # free intermediate grads; leaves keep theirs

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return _add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __neg__(self):
        return _mul_const(self, -1.0)

    def __sub__(self, other):
        return _add(self, _mul_const(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return _add(_wrap(other, self.dtype), _mul_const(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _mul_const(self, float(other))
        return _mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _mul_const(self, 1.0 / float(other))
        return _mul(self, _wrap(other, self.dtype) ** -1.0)

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) * self ** -1.0

    def __pow__(self, exponent: float):
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    def __getitem__(self, key):
        return _getitem(self, key)

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return _transpose(self, tuple(reversed(range(self.ndim))))

    # -- reductions and elementwise ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else _axis_count(self.shape, axis)
        return _mul_const(_sum(self, axis, keepdims), 1.0 / n)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return _unary(self, out_data, lambda g: g * out_data)

    def log(self) -> "Tensor":
        return _unary(self, np.log(self.data), lambda g: g / self.data)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)
        return _unary(self, out_data, lambda g: g * (0.5 / out_data))

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)
        return _unary(self, out_data, lambda g: g * (1.0 - out_data * out_data))

    def sigmoid(self) -> "Tensor":
        out_data = _sigmoid(self.data)
        return _unary(self, out_data, lambda g: g * out_data * (1.0 - out_data))

    def softplus(self) -> "Tensor":
        x = self.data
        out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        return _unary(self, out_data, lambda g: g * _sigmoid(x))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return _unary(self, np.where(mask, self.data, 0.0).astype(self.dtype), lambda g: g * mask)

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return _unary(self, np.abs(self.data), lambda g: g * sign)

    def clip(self, lo: float, hi: float) -> "Tensor":
        mask = (self.data > lo) & (self.data < hi)
        return _unary(self, np.clip(self.data, lo, hi), lambda g: g * mask)


# -- constructors ----------------------------------------------------------------


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=dtype) if dtype is not None else np.array(data)
    t = Tensor(arr, requires_grad=True)
    t.name = name
    return t


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _axis_count(shape: tuple[int, ...], axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


# -- op plumbing -------------------------------------------------------------------


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out = Tensor(out_data, requires_grad=True, _parents=parents, _backward=backward)
    else:
        out = Tensor(out_data)
    return out


def _unary(x: Tensor, out_data: np.ndarray, dgrad) -> Tensor:
    def backward(g):
        x._accumulate(dgrad(g), own=True)

    return _make(out_data, (x,), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.shape), own=True)

    return _make(a.data * b.data, (a, b), backward)


def _mul_const(x: Tensor, c: float) -> Tensor:
    return _unary(x, x.data * x.data.dtype.type(c), lambda g: g * c)


def _pow(x: Tensor, p: float) -> Tensor:
    out_data = x.data**p

    def backward(g):
        x._accumulate(g * p * x.data ** (p - 1.0), own=True)

    return _make(out_data, (x,), backward)


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            gx = np.broadcast_to(g, x.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            if not keepdims:
                g = np.expand_dims(g, axes)
            gx = np.broadcast_to(g, x.shape)
        x._accumulate(gx)

    return _make(out_data, (x,), backward)


def _reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def _transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), backward)


def _getitem(x: Tensor, key) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        x._accumulate(gx, own=True)

    return _make(x.data[key], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner axes differ: {a.shape[1]} vs {b.shape[0]}")

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g @ b.data.T, own=True)
        if b.requires_grad or b._parents:
            b._accumulate(a.data.T @ g, own=True)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x: (N, din)``, ``weight: (dout, din)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input feature axis ({x.shape[-1]}) does not match weight din ({weight.shape[1]})"
        )
    out = matmul(x, weight.T)
    if bias is not None:
        out = out + bias
    return out


# -- convolution / pooling -----------------------------------------------------------


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 spatial extents, got {v!r}")
    return t


def _conv_out_extent(size: int, k: int, s: int, p: int, axis: str) -> int:
    if size + 2 * p < k:
        raise ShapeError(f"conv3d: kernel ({k}) exceeds padded input ({size + 2 * p}) on axis {axis}")
    if s < 1:
        raise ShapeError(f"conv3d: stride must be >= 1 on axis {axis}, got {s}")
    return (size + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, kernel, stride, out_spatial) -> np.ndarray:
    """(B, C, D, H, W) padded input -> (B*P, C*kd*kh*kw) patch matrix."""
    b, c = xp.shape[:2]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_spatial
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    win = win[:, :, :do, :ho, :wo]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b * do * ho * wo, c * kd * kh * kw)
    return np.ascontiguousarray(cols)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation over (B, Cin, D, H, W) with kernel (Cout, Cin, kd, kh, kw)."""
    stride = _triple(stride)
    padding = _triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be 5-D (B, C, D, H, W), got {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d: weight must be 5-D (Cout, Cin, kd, kh, kw), got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv3d: input channel axis ({x.shape[1]}) does not match weight Cin ({weight.shape[1]})"
        )
    b, cin, d, h, w = x.shape
    cout = weight.shape[0]
    kernel = weight.shape[2:]
    kd, kh, kw = kernel
    sd, sh, sw = stride
    out_spatial = (
        _conv_out_extent(d, kd, sd, padding[0], "depth"),
        _conv_out_extent(h, kh, sh, padding[1], "height"),
        _conv_out_extent(w, kw, sw, padding[2], "width"),
    )
    do, ho, wo = out_spatial
    p = do * ho * wo
    k = cin * kd * kh * kw

    if any(padding):
        pd, ph, pw = padding
        xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    else:
        xp = x.data
    wmat = weight.data.reshape(cout, k)

    pointwise = kernel == (1, 1, 1) and stride == (1, 1, 1) and not any(padding)
    if pointwise:
        cols = np.ascontiguousarray(x.data.transpose(0, 2, 3, 4, 1).reshape(b * p, cin))
    else:
        cols = _im2col(xp, kernel, stride, out_spatial)
    out2d = cols @ wmat.T
    if bias is not None:
        out2d += bias.data
    out_data = out2d.reshape(b, do, ho, wo, cout).transpose(0, 4, 1, 2, 3)
    out_data = np.ascontiguousarray(out_data)

    def backward(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1).reshape(b * p, cout))
        if weight.requires_grad or weight._parents:
            weight._accumulate((g2d.T @ cols).reshape(weight.shape), own=True)
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accumulate(g2d.sum(axis=0), own=True)
        if x.requires_grad or x._parents:
            gcols = (g2d @ wmat).reshape(b, do, ho, wo, cin, kd, kh, kw)
            if pointwise:
                gx = np.ascontiguousarray(gcols[..., 0, 0, 0].transpose(0, 4, 1, 2, 3))
            else:
                gxp = np.zeros_like(xp)
                for a_, b_, c_ in product(range(kd), range(kh), range(kw)):
                    gxp[:, :, a_ : a_ + sd * do : sd, b_ : b_ + sh * ho : sh, c_ : c_ + sw * wo : sw] += (
                        gcols[..., a_, b_, c_].transpose(0, 4, 1, 2, 3)
                    )
                pd, ph, pw = padding
                gx = np.ascontiguousarray(gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w])
            x._accumulate(gx, own=True)

    return _make(out_data, (x, weight) if bias is None else (x, weight, bias), backward)


def avg_pool3d(x: Tensor, kernel, stride=None) -> Tensor:
    """Mean over sliding windows; ``stride`` defaults to ``kernel`` (non-overlapping)."""
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    if x.ndim != 5:
        raise ShapeError(f"avg_pool3d: input must be 5-D, got {x.shape}")
    b, c, d, h, w = x.shape
    for size, k, axis in zip((d, h, w), kernel, ("depth", "height", "width")):
        if k > size:
            raise ShapeError(f"avg_pool3d: kernel ({k}) exceeds input ({size}) on axis {axis}")
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do = (d - kd) // sd + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    if kernel == stride and d % kd == 0 and h % kh == 0 and w % kw == 0:
        out_data = x.data.reshape(b, c, do, kd, ho, kh, wo, kw).mean(axis=(3, 5, 7))
    else:
        win = sliding_window_view(x.data, kernel, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
        win = win[:, :, :do, :ho, :wo]
        out_data = np.ascontiguousarray(win.mean(axis=(5, 6, 7)))
    scale = 1.0 / (kd * kh * kw)

    def backward(g):
        gx = np.zeros_like(x.data)
        gs = g * scale
        for a_, b_, c_ in product(range(kd), range(kh), range(kw)):
            gx[:, :, a_ : a_ + sd * do : sd, b_ : b_ + sh * ho : sh, c_ : c_ + sw * wo : sw] += gs
        x._accumulate(gx, own=True)

    return _make(out_data, (x,), backward)


def upsample_nearest3d(x: Tensor, factor) -> Tensor:
    """Nearest-neighbor upsampling by integer factors along depth/height/width."""
    fd, fh, fw = _triple(factor)
    b, c, d, h, w = x.shape

    out_data = np.repeat(np.repeat(np.repeat(x.data, fd, axis=2), fh, axis=3), fw, axis=4)

    def backward(g):
        x._accumulate(g.reshape(b, c, d, fd, h, fh, w, fw).sum(axis=(3, 5, 7)), own=True)

    return _make(out_data, (x,), backward)


def channel_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position normalization over the channel axis of (B, C, D, H, W) maps.

    Fused into one op (forward keeps only the normalized map and inverse std);
    the backward is the standard layer-norm gradient over the channel axis.
    """
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + shift.data

    def backward(g):
        if gain.requires_grad or gain._parents:
            gain._accumulate((g * xhat).sum(axis=(0, 2, 3, 4), keepdims=True), own=True)
        if shift.requires_grad or shift._parents:
            shift._accumulate(g.sum(axis=(0, 2, 3, 4), keepdims=True), own=True)
        if x.requires_grad or x._parents:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2), own=True)

    return _make(out_data, (x, gain, shift), backward)


def take_positions(fmap: Tensor, batch_idx, z_idx, y_idx, x_idx) -> Tensor:
    """Gather per-position channel vectors: (B, C, D, H, W)[b, :, z, y, x] -> (N, C)."""
    bi = np.asarray(batch_idx)
    zi = np.asarray(z_idx)
    yi = np.asarray(y_idx)
    xi = np.asarray(x_idx)
    out_data = fmap.data[bi, :, zi, yi, xi]

    def backward(g):
        gf = np.zeros_like(fmap.data)
        np.add.at(gf, (bi, slice(None), zi, yi, xi), g)
        fmap._accumulate(gf, own=True)

    return _make(np.ascontiguousarray(out_data), (fmap,), backward)
