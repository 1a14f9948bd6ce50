"""Separable trilinear resampling shared by the data generator and the crop pipeline.

Output voxel ``v`` along an axis samples the input at ``v * (in_size / out_size)``
(corner-at-zero convention), which keeps the crop-to-view coordinate map exactly
invertible by ``round(p * out_size / in_size)``.
"""

from __future__ import annotations

import numpy as np

__all__ = ["resize_trilinear", "view_to_source_coord"]


def _interp_axis(arr: np.ndarray, out_n: int, axis: int) -> np.ndarray:
    in_n = arr.shape[axis]
    if out_n == in_n:
        return arr
    src = np.arange(out_n) * (in_n / out_n)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_n - 1)
    w = (src - i0).astype(arr.dtype)
    shape = [1] * arr.ndim
    shape[axis] = out_n
    w = w.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1 - w) + np.take(arr, i1, axis=axis) * w


def resize_trilinear(arr: np.ndarray, out_shape) -> np.ndarray:
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {arr.shape}")
    out = arr
    for axis, n in enumerate(out_shape):
        out = _interp_axis(out, int(n), axis)
    return np.ascontiguousarray(out)


def view_to_source_coord(view_idx, in_size: int, out_size: int):
    """Continuous source coordinate sampled by a view voxel under resize_trilinear."""
    return np.asarray(view_idx) * (in_size / out_size)
