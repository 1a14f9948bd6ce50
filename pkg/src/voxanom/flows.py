"""Invertible flow layers (act-norm, LU-parameterized linear, affine coupling).

Layers map row batches (N, d) to (z, logdet) where logdet is per-row. The
conditional variants take per-row condition vectors: couplings concatenate the
condition to their net input, act-norms predict per-row rescaling from it.
Inverses are plain numpy (used for round-trip checks, never differentiated).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

__all__ = ["ActNorm", "CondActNorm", "InvLinear", "AffineCoupling", "FlowStack", "build_flow_stack"]

LOG_2PI = float(np.log(2.0 * np.pi))


class ActNorm(nn.Module):
    """Per-dimension affine y -> s*y + b with data-dependent initialization."""

    def __init__(self, dim: int, dtype=np.float32, name: str = "actnorm"):
        self.scale = ad.parameter(np.ones(dim, dtype=dtype), name=f"{name}.scale")
        self.shift = ad.parameter(np.zeros(dim, dtype=dtype), name=f"{name}.shift")
        self.initialized = False

    def set_params(self, scale, shift) -> None:
        self.scale.data = np.asarray(scale, dtype=self.scale.data.dtype).copy()
        self.shift.data = np.asarray(shift, dtype=self.shift.data.dtype).copy()
        self.initialized = True

    def initialize_from(self, y: np.ndarray) -> None:
        std = y.std(axis=0) + 1e-6
        mean = y.mean(axis=0)
        self.set_params(1.0 / std, -mean / std)

    def forward(self, y: Tensor, cond: Tensor | None = None):
        if not self.initialized:
            self.initialize_from(y.data)
        if np.any(self.scale.data == 0.0):
            raise FloatingPointError("actnorm scale hit zero")
        z = y * self.scale + self.shift
        logdet = self.scale.abs().log().sum()
        return z, logdet + Tensor(np.zeros(y.shape[0], dtype=y.dtype))

    def inverse(self, z: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        return (z - self.shift.data) / self.scale.data


class CondActNorm(nn.Module):
    """Act-norm whose rescaling maps are predicted from the condition."""

    def __init__(self, dim: int, cond_dim: int, hidden: int = 32, log_scale_cap: float = 2.0,
                 rng: np.random.Generator | None = None, dtype=np.float32, name: str = "cond_actnorm"):
        self.net = nn.MLP([cond_dim, hidden, 2 * dim], rng=rng, dtype=dtype,
                          name=f"{name}.net", zero_init_last=True)
        self.dim = dim
        self.cap = log_scale_cap
        self.initialized = True

    def _params(self, cond: Tensor):
        h = self.net(cond)
        raw_a = h[:, : self.dim]
        shift = h[:, self.dim :]
        log_s = raw_a.tanh() * self.cap  # bounded away from 0: s in [e^-cap, e^cap]
        return log_s, shift

    def forward(self, y: Tensor, cond: Tensor):
        if cond is None:
            raise ValueError("conditional actnorm requires a condition")
        log_s, shift = self._params(cond)
        z = y * log_s.exp() + shift
        return z, log_s.sum(axis=1)

    def inverse(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            log_s, shift = self._params(Tensor(cond))
        return (z - shift.data) * np.exp(-log_s.data)


class InvLinear(nn.Module):
    """Invertible linear map via fixed-permutation LU parameterization.

    W = P (I + strictly_lower(L)) (upper(U)); logdet = sum log|diag(U)| in O(d).
    """

    def __init__(self, dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "invlinear"):
        rng = rng if rng is not None else np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        p, l, u = scipy.linalg.lu(q)
        self.perm = p.astype(dtype)  # fixed, not trained
        self.lower = ad.parameter(l.astype(dtype), name=f"{name}.lower")
        self.upper = ad.parameter(u.astype(dtype), name=f"{name}.upper")
        self._mask_l = np.tril(np.ones((dim, dim), dtype=dtype), -1)
        self._mask_u = np.triu(np.ones((dim, dim), dtype=dtype))
        self._eye = np.eye(dim, dtype=dtype)

    def _w(self) -> Tensor:
        l = self.lower * Tensor(self._mask_l) + Tensor(self._eye)
        u = self.upper * Tensor(self._mask_u)
        return ad.matmul(Tensor(self.perm), ad.matmul(l, u))

    def _check_diag(self) -> np.ndarray:
        diag = np.diagonal(self.upper.data)
        if np.any(np.abs(diag) < 1e-12):
            raise FloatingPointError("invertible linear layer became singular (|U_ii| < 1e-12)")
        return diag

    def forward(self, y: Tensor, cond: Tensor | None = None):
        self._check_diag()
        z = ad.matmul(y, self._w().T)
        logdet = ((self.upper * Tensor(self._eye)).sum(axis=1)).abs().log().sum()
        return z, logdet + Tensor(np.zeros(y.shape[0], dtype=y.dtype))

    def inverse(self, z: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        diag = self._check_diag()
        del diag
        l = self.lower.data * self._mask_l + self._eye
        u = self.upper.data * self._mask_u
        rhs = self.perm.T @ z.T
        mid = scipy.linalg.solve_triangular(l, rhs, lower=True, unit_diagonal=True)
        return scipy.linalg.solve_triangular(u, mid, lower=False).T


class AffineCoupling(nn.Module):
    """Half the dims pass through; the rest are scaled/shifted by a net of the first half.

    The log-scale goes through tanh times a learnable bound, and the net's last
    layer starts at zero so the layer begins as the identity.
    """

    def __init__(self, dim: int, parity: int, cond_dim: int = 0, hidden: int = 64,
                 rng: np.random.Generator | None = None, dtype=np.float32, name: str = "coupling"):
        if dim < 2:
            raise ValueError("affine coupling needs dim >= 2")
        idx = np.arange(dim)
        self.idx_a = np.flatnonzero(idx % 2 == parity % 2)
        self.idx_b = np.flatnonzero(idx % 2 != parity % 2)
        self.order = np.argsort(np.concatenate([self.idx_a, self.idx_b]))
        self.cond_dim = cond_dim
        d_b = len(self.idx_b)
        self.net = nn.MLP([len(self.idx_a) + cond_dim, hidden, 2 * d_b], rng=rng, dtype=dtype,
                          name=f"{name}.net", zero_init_last=True)
        self.scale_cap = ad.parameter(np.full(d_b, 2.0, dtype=dtype), name=f"{name}.scale_cap")
        self.initialized = True

    def _s_t(self, ya: Tensor, cond: Tensor | None):
        inp = ya if cond is None else ad.concat([ya, cond], axis=1)
        h = self.net(inp)
        d_b = len(self.idx_b)
        s = h[:, :d_b].tanh() * self.scale_cap
        t = h[:, d_b:]
        return s, t

    def forward(self, y: Tensor, cond: Tensor | None = None):
        if self.cond_dim and cond is None:
            raise ValueError("conditional coupling requires a condition")
        ya = y[:, self.idx_a]
        yb = y[:, self.idx_b]
        s, t = self._s_t(ya, cond)
        zb = yb * s.exp() + t
        z = ad.concat([ya, zb], axis=1)[:, self.order]
        return z, s.sum(axis=1)

    def inverse(self, z: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        za = z[:, self.idx_a]
        zb = z[:, self.idx_b]
        with ad.no_grad():
            s, t = self._s_t(Tensor(za), Tensor(cond) if cond is not None else None)
        yb = (zb - t.data) * np.exp(-s.data)
        return np.concatenate([za, yb], axis=1)[:, self.order]


class FlowStack(nn.Module):
    """Ordered invertible layers plus a standard-normal base measure."""

    def __init__(self, dim: int, layers: list, cond_dim: int = 0):
        self.dim = dim
        self.cond_dim = cond_dim
        self.layers = layers

    def forward(self, y: Tensor, cond: Tensor | None = None):
        logdet = Tensor(np.zeros(y.shape[0], dtype=y.dtype))
        z = y
        for layer in self.layers:
            z, ld = layer(z, cond)
            logdet = logdet + ld
        return z, logdet

    def nll_rows(self, y: Tensor, cond: Tensor | None = None) -> Tensor:
        """Per-row negative log-density: 0.5 ||f(y)||^2 + (d/2) log 2pi - logdet."""
        z, logdet = self.forward(y, cond)
        base = (z * z).sum(axis=1) * 0.5 + 0.5 * self.dim * LOG_2PI
        return base - logdet

    def inverse(self, z: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        y = z
        for layer in reversed(self.layers):
            y = layer.inverse(y, cond)
        return y

    def initialize_from(self, y: np.ndarray, cond: np.ndarray | None = None) -> None:
        """Trigger data-dependent act-norm initialization layer by layer."""
        with ad.no_grad():
            self.forward(Tensor(y), Tensor(cond) if cond is not None else None)

    @property
    def initialized(self) -> bool:
        return all(getattr(layer, "initialized", True) for layer in self.layers)


def build_flow_stack(dim: int, blocks: int = 8, cond_dim: int = 0, hidden: int = 64,
                     cond_hidden: int = 32, rng: np.random.Generator | None = None,
                     dtype=np.float32) -> FlowStack:
    """Glow-style stack: (act-norm, invertible linear, coupling) x blocks.

    Couplings alternate their split parity; with cond_dim > 0 the act-norms and
    couplings both consume the condition. For dim == 1 couplings are omitted
    (no way to split), leaving a stack of act-norms and linear layers.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    layers: list = []
    for b in range(blocks):
        if cond_dim:
            layers.append(CondActNorm(dim, cond_dim, hidden=cond_hidden, rng=rng,
                                      dtype=dtype, name=f"block{b}.actnorm"))
        else:
            layers.append(ActNorm(dim, dtype=dtype, name=f"block{b}.actnorm"))
        layers.append(InvLinear(dim, rng=rng, dtype=dtype, name=f"block{b}.linear"))
        if dim >= 2:
            layers.append(AffineCoupling(dim, parity=b, cond_dim=cond_dim, hidden=hidden,
                                         rng=rng, dtype=dtype, name=f"block{b}.coupling"))
    return FlowStack(dim, layers, cond_dim=cond_dim)
