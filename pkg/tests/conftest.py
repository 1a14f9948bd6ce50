"""Shared test helpers: the central finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from voxanom.autodiff import Tensor


def numerical_grad(fn, param: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``param.data`` (f64)."""
    base = param.data
    assert base.dtype == np.float64, "finite differences need f64 parameters"
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn().item()
        flat[i] = orig - eps
        f_minus = fn().item()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(fn, params: list[Tensor], eps: float = 1e-4, tol: float = 1e-5) -> float:
    """Compare tape gradients of scalar ``fn()`` against finite differences.

    Returns the worst relative error across all parameters and asserts it is
    below ``tol``.
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        analytic = p.grad.copy()
        numeric = numerical_grad(fn, p, eps=eps)
        worst = max(worst, max_rel_err(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e} >= {tol:.1e}"
    return worst
