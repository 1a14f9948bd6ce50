"""Layers and small network definitions built on the autodiff core.

Modules own named parameters (flat ``dict`` walk over attributes) so the
optimizer and checkpoint code can address every tensor by a stable path.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "Module",
    "Conv3d",
    "Linear",
    "ChannelNorm",
    "MLP",
    "UNet3d",
    "clip_grad_norm",
]


class Module:
    """Base class: parameter discovery, state dicts, train/eval mode."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel=3, stride=1, padding=0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32, name: str = "conv"):
        kernel = ad._triple(kernel)
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * int(np.prod(kernel))
        self.weight = ad.parameter(_he_init(rng, (cout, cin) + kernel, fan_in, dtype), name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros(cout, dtype=dtype), name=f"{name}.bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din: int, dout: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32, name: str = "linear"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = ad.parameter(_he_init(rng, (dout, din), din, dtype), name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros(dout, dtype=dtype), name=f"{name}.bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class ChannelNorm(Module):
    """Per-position normalization over the channel axis of (B, C, D, H, W) maps.

    Batch-independent, so inference is deterministic regardless of batch
    composition.
    """

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32, name: str = "norm"):
        self.eps = eps
        self.gain = ad.parameter(np.ones((1, channels, 1, 1, 1), dtype=dtype), name=f"{name}.gain")
        self.shift = ad.parameter(np.zeros((1, channels, 1, 1, 1), dtype=dtype), name=f"{name}.shift")

    def forward(self, x: Tensor) -> Tensor:
        return ad.channel_norm(x, self.gain, self.shift, eps=self.eps)


class MLP(Module):
    """Fully connected stack with ReLU between layers; no activation on the output."""

    def __init__(self, dims: list[int], rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "mlp", zero_init_last: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = [
            Linear(dims[i], dims[i + 1], rng=rng, dtype=dtype, name=f"{name}.{i}")
            for i in range(len(dims) - 1)
        ]
        if zero_init_last:
            self.layers[-1].weight.data[:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class _EncoderStage(Module):
    def __init__(self, cin, cout, rng, dtype, name):
        self.conv = Conv3d(cin, cout, kernel=3, padding=1, rng=rng, dtype=dtype, name=f"{name}.conv")
        self.norm = ChannelNorm(cout, dtype=dtype, name=f"{name}.norm")

    def forward(self, x):
        return self.norm(self.conv(x)).relu()


class UNet3d(Module):
    """Encoder-decoder over 3-D crops with skip connections and full-resolution output.

    The encoder applies a 3x3x3 conv + 2x average-pool per level; the decoder
    upsamples (nearest) and fuses skips with pointwise convs, which keeps the
    full-resolution stages cheap while the texture-sensitive first conv still
    sees raw voxels.

    Because the final decoder stage and head are pointwise, ``forward`` can
    evaluate them on gathered positions only (``positions`` argument), which is
    what the dense-SSL trainers use; the result equals indexing the dense map.
    """

    def __init__(self, in_channels: int, out_channels: int, base_channels: int = 12,
                 depth: int = 2, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.depth = depth
        widths = [base_channels * (2**i) for i in range(depth + 1)]
        self.encoders = [
            _EncoderStage(in_channels if i == 0 else widths[i - 1], widths[i], rng, dtype, f"enc{i}")
            for i in range(depth + 1)
        ]
        self.fusers = []
        self.fuse_norms = []
        for i in reversed(range(depth)):
            fused_in = widths[i + 1] + widths[i]
            self.fusers.append(Conv3d(fused_in, widths[i], kernel=1, rng=rng, dtype=dtype, name=f"dec{i}.mix"))
            self.fuse_norms.append(ChannelNorm(widths[i], dtype=dtype, name=f"dec{i}.norm"))
        self.head = Conv3d(widths[0], out_channels, kernel=1, rng=rng, dtype=dtype, name="head")

    def _rows_norm(self, norm: ChannelNorm, rows: Tensor) -> Tensor:
        n, c = rows.shape
        as_map = rows.reshape(n, c, 1, 1, 1)
        return norm(as_map).reshape(n, c)

    def _rows_conv1(self, conv: Conv3d, rows: Tensor) -> Tensor:
        w = conv.weight.reshape(conv.weight.shape[0], conv.weight.shape[1])
        return ad.linear(rows, w, conv.bias)

    def forward(self, x: Tensor, positions=None) -> Tensor:
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < self.depth:
                skips.append(x)
                x = ad.avg_pool3d(x, 2)
        # dense decoding for all but the final stage
        n_dense = len(self.fusers) if positions is None else len(self.fusers) - 1
        for k in range(n_dense):
            skip = skips[len(skips) - 1 - k]
            x = ad.upsample_nearest3d(x, 2)
            x = ad.concat([x, skip], axis=1)
            x = self.fuse_norms[k](self.fusers[k](x)).relu()
        if positions is None:
            return self.head(x)
        bi, zi, yi, xi = positions
        if not self.fusers:
            return self._rows_conv1(self.head, ad.take_positions(x, bi, zi, yi, xi))
        # final stage on gathered rows: nearest upsample == coarse lookup at p//2
        coarse_rows = ad.take_positions(x, bi, zi // 2, yi // 2, xi // 2)
        skip_rows = ad.take_positions(skips[0], bi, zi, yi, xi)
        rows = ad.concat([coarse_rows, skip_rows], axis=1)
        rows = self._rows_norm(self.fuse_norms[-1], self._rows_conv1(self.fusers[-1], rows)).relu()
        return self._rows_conv1(self.head, rows)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so the global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Gradients at or below the bound are untouched;
    above it they are scaled so the global norm equals ``max_norm`` exactly.
    """
    sq = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        sq += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm
