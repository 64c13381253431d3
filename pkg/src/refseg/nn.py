"""Parameterized neural building blocks over the autodiff tensors.

Layers are small value-semantic classes: construction draws weights from
an explicit random stream, `__call__` runs the forward pass, and
`named_params` yields (name, tensor) pairs for optimizers/checkpoints.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .rng import Stream


def glorot_uniform(stream: Stream, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return stream.uniform(shape, -limit, limit).astype(dtype)


class Linear:
    """Affine map over the trailing axis; weight laid out [in, out]."""

    def __init__(self, stream: Stream, n_in: int, n_out: int, bias: bool = True,
                 dtype=np.float32):
        self.weight = ad.param(glorot_uniform(stream, (n_in, n_out), n_in, n_out, dtype), dtype)
        self.bias = ad.param(np.zeros(n_out, dtype=dtype), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def named_params(self, prefix: str):
        yield prefix + ".weight", self.weight
        if self.bias is not None:
            yield prefix + ".bias", self.bias


class Conv2d:
    """1x1 or 3x3 convolution on [H,W,C]; 3x3 pads by 1 so extents hold."""

    def __init__(self, stream: Stream, n_in: int, n_out: int, kernel_size: int = 3,
                 stride: int = 1, bias: bool = True, dtype=np.float32):
        k = kernel_size
        fan_in, fan_out = k * k * n_in, k * k * n_out
        self.kernel = ad.param(glorot_uniform(stream, (k, k, n_in, n_out), fan_in, fan_out, dtype), dtype)
        self.bias = ad.param(np.zeros(n_out, dtype=dtype), dtype) if bias else None
        self.stride = stride
        self.padding = 1 if k == 3 else 0

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)

    def named_params(self, prefix: str):
        yield prefix + ".kernel", self.kernel
        if self.bias is not None:
            yield prefix + ".bias", self.bias


class LayerNorm:
    """Per-position normalization over the channel axis, then affine."""

    def __init__(self, width: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = ad.param(np.ones(width, dtype=dtype), dtype)
        self.offset = ad.param(np.zeros(width, dtype=dtype), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.normalize_lastdim(x, self.eps) * self.gain + self.offset

    def named_params(self, prefix: str):
        yield prefix + ".gain", self.gain
        yield prefix + ".offset", self.offset


class MultiheadAttention:
    """Scaled dot-product attention with per-head projections.

    Covers both self-attention (kv_in is the query input) and
    cross-attention (kv_in is a separate sequence). No residual path
    inside; callers compose residuals. An optional key mask drops padded
    key positions from every softmax row.
    """

    def __init__(self, stream: Stream, width: int, heads: int, dtype=np.float32):
        if heads < 1 or width % heads:
            raise ConfigurationError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.head_width = width // heads
        self.proj_q = Linear(stream.split(0), width, width, dtype=dtype)
        # no key bias: softmax scores are invariant to a shared key offset,
        # so the parameter would be permanently gradient-free
        self.proj_k = Linear(stream.split(1), width, width, bias=False, dtype=dtype)
        self.proj_v = Linear(stream.split(2), width, width, dtype=dtype)
        self.proj_out = Linear(stream.split(3), width, width, dtype=dtype)

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_mask: np.ndarray | None = None,
                 return_weights: bool = False):
        if q_in.shape[-1] != self.width or kv_in.shape[-1] != self.width:
            raise DimensionError(
                f"attention expects width {self.width}, got {q_in.shape} x {kv_in.shape}")
        s, m = q_in.shape[0], kv_in.shape[0]
        h, d = self.heads, self.head_width
        q = self.proj_q(q_in).reshape(s, h, d).transpose((1, 0, 2))
        k = self.proj_k(kv_in).reshape(m, h, d).transpose((1, 0, 2))
        v = self.proj_v(kv_in).reshape(m, h, d).transpose((1, 0, 2))
        scores = ad.matmul(q, k.transpose((0, 2, 1))) * (1.0 / math.sqrt(d))
        mask = None if key_mask is None else np.broadcast_to(np.asarray(key_mask, bool), (h, s, m))
        attn = ad.softmax_lastdim(scores, mask)
        mixed = ad.matmul(attn, v).transpose((1, 0, 2)).reshape(s, self.width)
        out = self.proj_out(mixed)
        if return_weights:
            return out, attn.data
        return out

    def named_params(self, prefix: str):
        yield from self.proj_q.named_params(prefix + ".q")
        yield from self.proj_k.named_params(prefix + ".k")
        yield from self.proj_v.named_params(prefix + ".v")
        yield from self.proj_out.named_params(prefix + ".out")


class FeedForward:
    """Two-layer MLP with a relu between, width-preserving."""

    def __init__(self, stream: Stream, width: int, hidden: int, dtype=np.float32):
        self.inner = Linear(stream.split(0), width, hidden, dtype=dtype)
        self.outer = Linear(stream.split(1), hidden, width, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(self.inner(x).relu())

    def named_params(self, prefix: str):
        yield from self.inner.named_params(prefix + ".inner")
        yield from self.outer.named_params(prefix + ".outer")


# ---------------------------------------------------------------------------
# positional encodings (pure functions of extents, cached by the caller)
# ---------------------------------------------------------------------------

def sine_table_1d(length: int, width: int, dtype=np.float32) -> np.ndarray:
    """Sinusoid bank over sequence index; even channels sin, odd cos."""
    if width % 2:
        raise ConfigurationError(f"1D sine encoding needs even width, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(np.arange(0, width, 2, dtype=np.float64) * (-math.log(10000.0) / width))
    table = np.zeros((length, width), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table.astype(dtype)


def sine_table_2d(height: int, width: int, channels: int, dtype=np.float32) -> np.ndarray:
    """Row-index and column-index 1D banks concatenated, channels/2 each."""
    if channels % 4:
        raise ConfigurationError(f"2D sine encoding needs channels divisible by 4, got {channels}")
    half = channels // 2
    rows = sine_table_1d(height, half, dtype)
    cols = sine_table_1d(width, half, dtype)
    out = np.empty((height, width, channels), dtype=dtype)
    out[:, :, :half] = rows[:, None, :]
    out[:, :, half:] = cols[None, :, :]
    return out
