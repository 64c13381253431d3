"""Decoder over vision tokens with per-layer query calibration.

Each layer is a standard pre-norm decoder block: self-attention over the
vision-token stream, cross-attention with the current language queries as
keys/values, then a feed-forward block, all residual. After each layer a
query-generation pass over that layer's output produces calibration
queries, which are folded into the running query set through a learnable
per-layer gain:

    queries[n] = gain[n] * calibration[n] + queries[n-1]

Gains start at zero, so an untrained model is exactly the fixed-query
decoder; `skip_calibration` runs that baseline explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .neck import QueryGenerator
from .nn import FeedForward, LayerNorm, MultiheadAttention, sine_table_1d, sine_table_2d
from .rng import Stream


@dataclass
class DecodeTrace:
    """Per-layer calibration terms, for invariant checks and ablations."""
    gains: list[float] = field(default_factory=list)
    calibration_terms: list[Tensor] = field(default_factory=list)
    initial_queries: Tensor | None = None


class DecoderLayer:
    """Self-attention, cross-attention onto queries, feed-forward; residual."""

    def __init__(self, stream: Stream, width: int, heads: int, ffn_width: int, dtype=np.float32):
        self.norm_self = LayerNorm(width, dtype)
        self.attn_self = MultiheadAttention(stream.split(0), width, heads, dtype)
        self.norm_cross = LayerNorm(width, dtype)
        self.attn_cross = MultiheadAttention(stream.split(1), width, heads, dtype)
        self.norm_ffn = LayerNorm(width, dtype)
        self.ffn = FeedForward(stream.split(2), width, ffn_width, dtype)

    def __call__(self, stream_feat: Tensor, queries: Tensor,
                 collect_attn: list | None = None) -> Tensor:
        if stream_feat.shape[-1] != queries.shape[-1]:
            raise DimensionError(
                f"stream width {stream_feat.shape} does not match queries {queries.shape}")
        normed = self.norm_self(stream_feat)
        if collect_attn is None:
            x = stream_feat + self.attn_self(normed, normed)
            x = x + self.attn_cross(self.norm_cross(x), queries)
        else:
            attended, w_self = self.attn_self(normed, normed, return_weights=True)
            x = stream_feat + attended
            crossed, w_cross = self.attn_cross(self.norm_cross(x), queries, return_weights=True)
            x = x + crossed
            collect_attn.extend([w_self, w_cross])
        return x + self.ffn(self.norm_ffn(x))

    def named_params(self, prefix: str):
        yield from self.norm_self.named_params(prefix + ".norm_self")
        yield from self.attn_self.named_params(prefix + ".attn_self")
        yield from self.norm_cross.named_params(prefix + ".norm_cross")
        yield from self.attn_cross.named_params(prefix + ".attn_cross")
        yield from self.norm_ffn.named_params(prefix + ".norm_ffn")
        yield from self.ffn.named_params(prefix + ".ffn")


def calibrate(previous: Tensor, calibration: Tensor, gain: Tensor) -> Tensor:
    """Gated residual update of the query set."""
    return gain * calibration + previous


class CalibrationDecoder:
    """N decoder layers alternating with query calibration."""

    def __init__(self, stream: Stream, width: int, heads: int, ffn_width: int,
                 layers: int, num_queries: int, grid_positions: int,
                 share_calibrators: bool = False, dtype=np.float32):
        if layers < 1:
            raise ConfigurationError(f"decoder needs at least one layer, got {layers}")
        self.width = width
        self.num_queries = num_queries
        self.layers = [DecoderLayer(stream.split(i), width, heads, ffn_width, dtype)
                       for i in range(layers)]
        if share_calibrators:
            shared = QueryGenerator(stream.split(100), width, num_queries, grid_positions, dtype)
            self.calibrators = [shared] * layers
        else:
            self.calibrators = [
                QueryGenerator(stream.split(100 + i), width, num_queries, grid_positions, dtype)
                for i in range(layers)
            ]
        self.share_calibrators = share_calibrators
        self.gains = [ad.param(np.zeros((), dtype=dtype), dtype) for _ in range(layers)]
        self._pos_cache: dict[tuple, np.ndarray] = {}

    def _positions(self, h: int, w: int, dtype) -> tuple[np.ndarray, np.ndarray]:
        key = (h, w, self.num_queries, str(dtype))
        hit = self._pos_cache.get(key)
        if hit is None:
            hit = (sine_table_2d(h, w, self.width, dtype).reshape(h * w, self.width),
                   sine_table_1d(self.num_queries, self.width, dtype))
            self._pos_cache[key] = hit
        return hit

    def __call__(self, fused_grid: Tensor, queries: Tensor, words: Tensor,
                 word_mask: np.ndarray, skip_calibration: bool = False,
                 collect_attn: list | None = None) -> tuple[Tensor, Tensor, DecodeTrace]:
        h, w, c = fused_grid.shape
        if c != self.width or queries.shape != (self.num_queries, self.width):
            raise DimensionError(
                f"decoder built for width {self.width} x {self.num_queries} queries, "
                f"got grid {fused_grid.shape} and queries {queries.shape}")
        pos_grid, pos_query = self._positions(h, w, fused_grid.dtype)
        stream_feat = fused_grid.reshape(h * w, c) + ad.constant(pos_grid)
        queries = queries + ad.constant(pos_query)
        trace = DecodeTrace(initial_queries=queries)
        for layer, calibrator, gain in zip(self.layers, self.calibrators, self.gains):
            stream_feat = layer(stream_feat, queries, collect_attn)
            if skip_calibration:
                continue
            generated = calibrator(stream_feat.reshape(h, w, c), words, word_mask)
            trace.gains.append(gain.item())
            trace.calibration_terms.append(generated.queries)
            queries = calibrate(queries, generated.queries, gain)
        return stream_feat, queries, trace

    def named_params(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i}")
        if self.share_calibrators:
            yield from self.calibrators[0].named_params(f"{prefix}.calib_shared")
        else:
            for i, calibrator in enumerate(self.calibrators):
                yield from calibrator.named_params(f"{prefix}.calib{i}")
        for i, gain in enumerate(self.gains):
            yield f"{prefix}.gain{i}", gain
