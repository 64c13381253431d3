"""Segmentation head, language reconstruction head, and the objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .nn import Conv2d, Linear
from .rng import Stream


@dataclass
class ReconPair:
    """Reconstructed query summary and the projected text summary."""
    reconstructed: Tensor  # [1, width]
    projected: Tensor      # [1, width]


class MaskHead:
    """3x3 conv to one channel, nearest-upsampled back to input resolution."""

    def __init__(self, stream: Stream, width: int, total_stride: int, dtype=np.float32):
        if total_stride < 1 or total_stride & (total_stride - 1):
            raise ContractError(f"total stride must be a power of two, got {total_stride}")
        self.to_logit = Conv2d(stream, width, 1, kernel_size=3, dtype=dtype)
        self.doublings = total_stride.bit_length() - 1

    def __call__(self, grid: Tensor) -> Tensor:
        logits = self.to_logit(grid)
        for _ in range(self.doublings):
            logits = ad.upsample2x(logits)
        return logits.reshape(logits.shape[0], logits.shape[1])

    def named_params(self, prefix: str):
        yield from self.to_logit.named_params(prefix + ".to_logit")


class _ProjectionChain:
    """Three stacked projections with relu after the first two."""

    def __init__(self, stream: Stream, width: int, dtype=np.float32):
        self.first = Linear(stream.split(0), width, width, bias=False, dtype=dtype)
        self.second = Linear(stream.split(1), width, width, bias=False, dtype=dtype)
        self.third = Linear(stream.split(2), width, width, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.third(self.second(self.first(x).relu()).relu())

    def named_params(self, prefix: str):
        yield from self.first.named_params(prefix + ".first")
        yield from self.second.named_params(prefix + ".second")
        yield from self.third.named_params(prefix + ".third")


class ReconstructionHead:
    """Project final queries and average them into one sentence-like vector."""

    def __init__(self, stream: Stream, width: int, dtype=np.float32):
        self.chain = _ProjectionChain(stream, width, dtype)

    def __call__(self, queries: Tensor) -> Tensor:
        return self.chain(queries).mean(axis=0, keepdims=True)

    def named_params(self, prefix: str):
        yield from self.chain.named_params(prefix + ".chain")


class TextProjector:
    """Pool unpadded word features plus the global feature into one vector."""

    def __init__(self, stream: Stream, width: int, dtype=np.float32):
        self.chain = _ProjectionChain(stream, width, dtype)

    def __call__(self, words: Tensor, sentence: Tensor, word_mask: np.ndarray) -> Tensor:
        length = int(np.asarray(word_mask, bool).sum())
        kept = ad.slice_rows(words, 0, length)  # pads are contiguous at the end
        rows = ad.concat([kept, sentence], axis=0)
        return self.chain(rows).mean(axis=0, keepdims=True)

    def named_params(self, prefix: str):
        yield from self.chain.named_params(prefix + ".chain")


def recon_loss(pair: ReconPair) -> Tensor:
    """Mean squared difference over the channel axis."""
    if pair.reconstructed.shape != pair.projected.shape:
        raise DimensionError(
            f"reconstruction pair widths differ: {pair.reconstructed.shape} "
            f"vs {pair.projected.shape}")
    diff = pair.reconstructed - pair.projected
    return (diff * diff).mean()


def seg_loss(logits: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Mean per-pixel binary cross-entropy with logits.

    Uses the stable softplus identity: bce(z, y) = softplus(z) - z * y.
    """
    gt = np.asarray(gt_mask)
    if logits.shape != gt.shape:
        raise DimensionError(f"logits {logits.shape} do not match mask {gt.shape}")
    target = ad.constant(gt.astype(logits.dtype))
    return (ad.softplus(logits) - logits * target).mean()


def total_loss(seg: Tensor, recon: Tensor, seg_weight: float, recon_weight: float) -> Tensor:
    if seg_weight < 0 or recon_weight < 0:
        raise ContractError(f"loss weights must be nonnegative, got {seg_weight}, {recon_weight}")
    return seg * seg_weight + recon * recon_weight
