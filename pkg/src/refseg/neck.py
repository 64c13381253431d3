"""Pyramid fusion into a single grid, and language-query generation.

The fusion neck lifts all pyramid stages to the stride-8 resolution
(upsampling the coarse stage, pooling the fine one), rectifies and
concatenates them, aggregates with a 1x1 conv, then appends a normalized
coordinate grid and fuses once more. The query generator turns the fused
grid into per-query score vectors, matches them against projected word
features, and emits each query as a convex combination of rectified word
projections together with the word-attention map itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import FeaturePyramid
from .errors import DegenerateRowError, DimensionError
from .nn import Conv2d, Linear
from .rng import Stream


def coord_grid(height: int, width: int, dtype=np.float32) -> np.ndarray:
    """[H,W,2] grid: channel 0 is x in [-1,1], channel 1 is y in [-1,1].

    A single row or column maps to 0 (the midpoint convention).
    """
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    out = np.empty((height, width, 2), dtype=dtype)
    out[:, :, 0] = xs[None, :]
    out[:, :, 1] = ys[:, None]
    return out


@dataclass
class FusedGrid:
    """Single fused feature grid at the stride-8 resolution."""
    grid: Tensor  # [H_g, W_g, width]


@dataclass
class QuerySet:
    """Language queries plus their word-attention map.

    Every attention row sums to 1 over unpadded words; pad columns are
    exactly zero, so each query is a convex combination of the rectified
    word projections.
    """
    queries: Tensor          # [num_queries, width]
    word_attn: Tensor        # [num_queries, max_len]


class FusionNeck:
    """Merge the three pyramid stages into one grid with coordinates."""

    def __init__(self, stream: Stream, stage_channels, width: int, dtype=np.float32):
        _, c2, c3, c4 = stage_channels
        self.width = width
        self.lift4 = Linear(stream.split(0), c4, width, bias=False, dtype=dtype)
        self.carry4 = Linear(stream.split(1), width, width, bias=False, dtype=dtype)
        self.lift3 = Linear(stream.split(2), c3, width, bias=False, dtype=dtype)
        self.carry3 = Linear(stream.split(3), 2 * width, width, bias=False, dtype=dtype)
        self.lift2 = Linear(stream.split(4), c2, width, bias=False, dtype=dtype)
        self.aggregate = Conv2d(stream.split(5), 5 * width, width, kernel_size=1, dtype=dtype)
        self.fuse_coords = Conv2d(stream.split(6), width + 2, width, kernel_size=1, dtype=dtype)
        self._coord_cache: dict[tuple, np.ndarray] = {}

    def __call__(self, pyramid: FeaturePyramid) -> FusedGrid:
        h2, w2 = pyramid.stage2.shape[:2]
        h3, w3 = pyramid.stage3.shape[:2]
        h4, w4 = pyramid.stage4.shape[:2]
        if (h2, w2) != (2 * h3, 2 * w3) or (h3, w3) != (2 * h4, 2 * w4):
            raise DimensionError(
                f"inconsistent pyramid extents: {pyramid.stage2.shape} / "
                f"{pyramid.stage3.shape} / {pyramid.stage4.shape}")
        top = ad.upsample2x(self.lift4(pyramid.stage4).relu())
        mid = ad.concat([self.carry4(top).relu(), self.lift3(pyramid.stage3).relu()], axis=2)
        pooled2 = ad.avgpool2x2(pyramid.stage2)
        low = ad.concat([self.carry3(mid).relu(), self.lift2(pooled2).relu()], axis=2)
        merged = self.aggregate(ad.concat([low, mid, top], axis=2))
        key = (h3, w3, str(merged.dtype))
        coords = self._coord_cache.get(key)
        if coords is None:
            coords = coord_grid(h3, w3, merged.dtype)
            self._coord_cache[key] = coords
        fused = self.fuse_coords(ad.concat([merged, ad.constant(coords)], axis=2))
        return FusedGrid(grid=fused)

    def named_params(self, prefix: str):
        yield from self.lift4.named_params(prefix + ".lift4")
        yield from self.carry4.named_params(prefix + ".carry4")
        yield from self.lift3.named_params(prefix + ".lift3")
        yield from self.carry3.named_params(prefix + ".carry3")
        yield from self.lift2.named_params(prefix + ".lift2")
        yield from self.aggregate.named_params(prefix + ".aggregate")
        yield from self.fuse_coords.named_params(prefix + ".fuse_coords")


class QueryGenerator:
    """Image-conditioned language queries.

    A 3x3 conv maps the grid to one channel per query; each query's
    flattened response is projected and scored against projected word
    features (both rectified, so scores are nonnegative), the scores are
    softmax-normalized over unpadded words, and the queries are the
    attention-weighted sums of rectified word projections.
    """

    def __init__(self, stream: Stream, width: int, num_queries: int, grid_positions: int,
                 dtype=np.float32):
        if num_queries < 1:
            raise DimensionError(f"need at least one query, got {num_queries}")
        self.num_queries = num_queries
        self.grid_positions = grid_positions
        self.to_channels = Conv2d(stream.split(0), width, num_queries, kernel_size=3, dtype=dtype)
        self.score_grid = Linear(stream.split(1), grid_positions, width, bias=False, dtype=dtype)
        self.score_words = Linear(stream.split(2), width, width, bias=False, dtype=dtype)
        self.project_words = Linear(stream.split(3), width, width, bias=False, dtype=dtype)

    def __call__(self, grid: Tensor, words: Tensor, word_mask: np.ndarray) -> QuerySet:
        word_mask = np.asarray(word_mask, bool)
        if not word_mask.any():
            raise DegenerateRowError("query generation needs at least one unpadded word")
        h, w = grid.shape[0], grid.shape[1]
        if h * w != self.grid_positions:
            raise DimensionError(
                f"grid has {h * w} positions but the generator was built for {self.grid_positions}")
        channels = self.to_channels(grid).reshape(h * w, self.num_queries)
        per_query = self.score_grid(channels.transpose()).relu()      # [N_q, width]
        per_word = self.score_words(words).relu()                     # [max_len, width]
        scores = ad.matmul(per_query, per_word.transpose())           # [N_q, max_len]
        attn = ad.softmax_lastdim(scores, np.broadcast_to(word_mask, scores.shape))
        queries = ad.matmul(attn, self.project_words(words).relu())
        return QuerySet(queries=queries, word_attn=attn)

    def named_params(self, prefix: str):
        yield from self.to_channels.named_params(prefix + ".to_channels")
        yield from self.score_grid.named_params(prefix + ".score_grid")
        yield from self.score_words.named_params(prefix + ".score_words")
        yield from self.project_words.named_params(prefix + ".project_words")
