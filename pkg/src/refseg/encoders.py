"""Toy text and image encoders plus the cross-modal fusion block.

The text side is an embedding + sinusoid positions + a short stack of
transformer encoder blocks with key-padding masking; position 0 carries a
sentence-level slot whose final state is projected into a global feature.
The image side is four strided conv stages; after stages 2-4 a fusion
block cross-attends every spatial position onto the words and the
rectified result is added back into the stream before the next stage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateRowError, DimensionError
from .nn import (
    Conv2d,
    FeedForward,
    LayerNorm,
    Linear,
    MultiheadAttention,
    glorot_uniform,
    sine_table_1d,
)
from .rng import Stream

GLOBAL_TOKEN = 0
PAD_TOKEN = 1


@dataclass
class TokenSeq:
    """Padded token ids with their keep-mask.

    `ids` has fixed length; `mask` is True at real positions (including
    the leading global slot) and False at trailing pads. `length` counts
    the real positions.
    """
    ids: np.ndarray
    mask: np.ndarray
    length: int

    @classmethod
    def from_ids(cls, word_ids, max_len: int) -> "TokenSeq":
        words = list(word_ids)
        if len(words) + 1 > max_len:
            raise ContractError(f"sequence of {len(words)} words exceeds max length {max_len}")
        ids = np.full(max_len, PAD_TOKEN, dtype=np.int64)
        ids[0] = GLOBAL_TOKEN
        ids[1:1 + len(words)] = words
        mask = np.zeros(max_len, dtype=bool)
        mask[:1 + len(words)] = True
        return cls(ids=ids, mask=mask, length=1 + len(words))

    def validate(self):
        if self.ids.shape != self.mask.shape or self.ids.ndim != 1:
            raise DimensionError(f"token ids {self.ids.shape} and mask {self.mask.shape} must be equal 1-D")
        if self.length < 1 or not self.mask[:self.length].all() or self.mask[self.length:].any():
            raise ContractError("pad positions must be contiguous at the end")
        if self.ids[0] != GLOBAL_TOKEN:
            raise ContractError("position 0 must hold the global-slot token")
        return self


@dataclass
class TextFeatures:
    """Per-word features plus the projected sentence-level feature."""
    words: Tensor        # [max_len, width]
    sentence: Tensor     # [1, width]


@dataclass
class FeaturePyramid:
    """Fused multi-modal features at strides 4, 8 and 16."""
    stage2: Tensor
    stage3: Tensor
    stage4: Tensor


class TextEncoder:
    """Embedding + positions + masked transformer blocks + global projection."""

    def __init__(self, stream: Stream, vocab_size: int, width: int, heads: int,
                 ffn_width: int, blocks: int, max_len: int, dtype=np.float32):
        self.embed = ad.param(glorot_uniform(stream.split(0), (vocab_size, width), vocab_size, width, dtype), dtype)
        self.positions = sine_table_1d(max_len, width, dtype)
        self.blocks = []
        for i in range(blocks):
            bs = stream.split(1 + i)
            self.blocks.append({
                "norm_attn": LayerNorm(width, dtype),
                "attn": MultiheadAttention(bs.split(0), width, heads, dtype),
                "norm_ffn": LayerNorm(width, dtype),
                "ffn": FeedForward(bs.split(1), width, ffn_width, dtype),
            })
        self.global_proj = Linear(stream.split(101), width, width, dtype=dtype)

    def __call__(self, tokens: TokenSeq) -> TextFeatures:
        tokens.validate()
        if tokens.length < 1 or not tokens.mask.any():
            raise ContractError("cannot encode an all-pad sequence")
        x = ad.gather_rows(self.embed, tokens.ids) + ad.constant(self.positions, self.embed.dtype)
        for block in self.blocks:
            normed = block["norm_attn"](x)
            x = x + block["attn"](normed, normed, key_mask=tokens.mask)
            x = x + block["ffn"](block["norm_ffn"](x))
        sentence = self.global_proj(ad.slice_rows(x, 0, 1))
        return TextFeatures(words=x, sentence=sentence)

    def named_params(self, prefix: str):
        yield prefix + ".embed", self.embed
        for i, block in enumerate(self.blocks):
            for key, layer in block.items():
                yield from layer.named_params(f"{prefix}.block{i}.{key}")
        yield from self.global_proj.named_params(prefix + ".global_proj")


class VisionLanguageFusion:
    """Single-head cross-attention from spatial positions onto words.

    Queries come from the flattened stage features, keys/values from the
    word features; scores are scaled by the square root of the stage
    width and normalized over unpadded words only.
    """

    def __init__(self, stream: Stream, stage_width: int, text_width: int, dtype=np.float32):
        self.stage_width = stage_width
        self.proj_q = Linear(stream.split(0), stage_width, stage_width, bias=False, dtype=dtype)
        self.proj_k = Linear(stream.split(1), text_width, stage_width, bias=False, dtype=dtype)
        self.proj_v = Linear(stream.split(2), text_width, stage_width, bias=False, dtype=dtype)
        self.proj_out = Linear(stream.split(3), stage_width, stage_width, bias=False, dtype=dtype)

    def __call__(self, stage_feat: Tensor, words: Tensor, word_mask: np.ndarray,
                 return_weights: bool = False):
        if not np.asarray(word_mask, bool).any():
            raise DegenerateRowError("fusion needs at least one unpadded word")
        h, w, c = stage_feat.shape
        if c != self.stage_width:
            raise DimensionError(f"fusion expects stage width {self.stage_width}, got {stage_feat.shape}")
        queries = self.proj_q(stage_feat.reshape(h * w, c))
        keys = self.proj_k(words)
        values = self.proj_v(words)
        scores = ad.matmul(queries, keys.transpose()) * (1.0 / math.sqrt(c))
        attn = ad.softmax_lastdim(scores, np.broadcast_to(np.asarray(word_mask, bool), scores.shape))
        fused = self.proj_out(ad.matmul(attn, values)).reshape(h, w, c)
        if return_weights:
            return fused, attn.data
        return fused

    def named_params(self, prefix: str):
        yield from self.proj_q.named_params(prefix + ".q")
        yield from self.proj_k.named_params(prefix + ".k")
        yield from self.proj_v.named_params(prefix + ".v")
        yield from self.proj_out.named_params(prefix + ".out")


class _Stage:
    """Stride-2 downsampling conv + relu, then a residual 3x3 conv."""

    def __init__(self, stream: Stream, n_in: int, n_out: int, dtype=np.float32):
        self.down = Conv2d(stream.split(0), n_in, n_out, kernel_size=3, stride=2, dtype=dtype)
        self.refine = Conv2d(stream.split(1), n_out, n_out, kernel_size=3, stride=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.down(x).relu()
        return h + self.refine(h)

    def named_params(self, prefix: str):
        yield from self.down.named_params(prefix + ".down")
        yield from self.refine.named_params(prefix + ".refine")


class VisualEncoder:
    """Four conv stages with language fused in after stages 2, 3 and 4."""

    def __init__(self, stream: Stream, stage_channels, text_width: int, dtype=np.float32):
        c1, c2, c3, c4 = stage_channels
        self.stage_channels = tuple(stage_channels)
        self.stages = [
            _Stage(stream.split(0), 3, c1, dtype),
            _Stage(stream.split(1), c1, c2, dtype),
            _Stage(stream.split(2), c2, c3, dtype),
            _Stage(stream.split(3), c3, c4, dtype),
        ]
        self.fusions = {
            2: VisionLanguageFusion(stream.split(12), c2, text_width, dtype),
            3: VisionLanguageFusion(stream.split(13), c3, text_width, dtype),
            4: VisionLanguageFusion(stream.split(14), c4, text_width, dtype),
        }

    def __call__(self, image: Tensor, words: Tensor, word_mask: np.ndarray) -> FeaturePyramid:
        h, w = image.shape[0], image.shape[1]
        if h % 16 or w % 16:
            raise DimensionError(f"image extents must be divisible by 16, got {image.shape}")
        x = self.stages[0](image)
        x = self.stages[1](x)
        fused2 = self.fusions[2](x, words, word_mask)
        x = self.stages[2](x + fused2.relu())
        fused3 = self.fusions[3](x, words, word_mask)
        x = self.stages[3](x + fused3.relu())
        fused4 = self.fusions[4](x, words, word_mask)
        return FeaturePyramid(stage2=fused2, stage3=fused3, stage4=fused4)

    def named_params(self, prefix: str):
        for i, stage in enumerate(self.stages, start=1):
            yield from stage.named_params(f"{prefix}.stage{i}")
        for i, fusion in self.fusions.items():
            yield from fusion.named_params(f"{prefix}.fuse{i}")
