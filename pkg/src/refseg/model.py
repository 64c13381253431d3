"""Full network assembly: encoders, neck, decoder, heads.

One `Network` owns every parameter; `forward` runs a whole sample through
the pipeline. Training mode additionally evaluates the reconstruction
branch; inference mode never touches it (the returned op count for that
branch is zero by construction and is asserted in tests).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import Config
from .decoder import CalibrationDecoder, DecodeTrace
from .encoders import TextEncoder, TokenSeq, VisualEncoder
from .errors import DimensionError
from .heads import MaskHead, ReconPair, ReconstructionHead, TextProjector
from .neck import FusionNeck, QueryGenerator
from .rng import Stream
from . import data as data_mod

NECK_STRIDE = 8  # fused grid lives at 1/8 input resolution


@dataclass
class ForwardResult:
    mask_logits: Tensor
    recon: ReconPair | None
    recon_ops: int
    trace: DecodeTrace
    queries: Tensor
    word_attn: Tensor


class Network:
    def __init__(self, config: Config, dtype=None):
        cfg = config
        self.config = cfg
        self.dtype = dtype if dtype is not None else (
            np.float64 if cfg.precision == "float64" else np.float32)
        root = Stream.from_seed(cfg.model_seed)
        grid_side = cfg.image_size // NECK_STRIDE
        self.text = TextEncoder(root.split(0), data_mod.VOCAB_SIZE, cfg.width, cfg.heads,
                                cfg.ffn_width, cfg.text_blocks, cfg.max_len, self.dtype)
        self.visual = VisualEncoder(root.split(1), cfg.stage_channels, cfg.width, self.dtype)
        self.neck = FusionNeck(root.split(2), cfg.stage_channels, cfg.width, self.dtype)
        self.query_gen = QueryGenerator(root.split(3), cfg.width, cfg.num_queries,
                                        grid_side * grid_side, self.dtype)
        self.decoder = CalibrationDecoder(root.split(4), cfg.width, cfg.heads, cfg.ffn_width,
                                          cfg.decoder_layers, cfg.num_queries,
                                          grid_side * grid_side,
                                          share_calibrators=cfg.share_qgm_params,
                                          dtype=self.dtype)
        self.mask_head = MaskHead(root.split(5), cfg.width, NECK_STRIDE, self.dtype)
        self.recon_head = ReconstructionHead(root.split(6), cfg.width, self.dtype)
        self.text_proj = TextProjector(root.split(7), cfg.width, self.dtype)

    def named_params(self):
        yield from self.text.named_params("text")
        yield from self.visual.named_params("visual")
        yield from self.neck.named_params("neck")
        yield from self.query_gen.named_params("query_gen")
        yield from self.decoder.named_params("decoder")
        yield from self.mask_head.named_params("mask_head")
        yield from self.recon_head.named_params("recon_head")
        yield from self.text_proj.named_params("text_proj")

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        """Parameters the optimizer may update.

        With the calibration decoder disabled the per-layer gains and the
        calibration query generators are frozen, so the fixed-query
        baseline differs from the full model only in the mechanism under
        test.
        """
        params = list(self.named_params())
        if self.config.cdec_enabled:
            return params
        return [(n, p) for n, p in params
                if not (n.startswith("decoder.calib") or n.startswith("decoder.gain"))]

    def load_param_data(self, arrays: dict[str, np.ndarray]):
        params = self.param_dict()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise DimensionError(
                f"parameter set mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, tensor in params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != tensor.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} vs model {tensor.shape}")
            tensor.data = arr.copy()

    def _as_image_tensor(self, image) -> Tensor:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DimensionError(f"expected an [H,W,3] image, got {arr.shape}")
        return ad.constant(arr.astype(self.dtype, copy=False))

    def forward(self, tokens: TokenSeq, image, training: bool = False,
                skip_calibration: bool = False, collect_attn: list | None = None) -> ForwardResult:
        image_t = self._as_image_tensor(image)
        text_feats = self.text(tokens)
        pyramid = self.visual(image_t, text_feats.words, tokens.mask)
        fused = self.neck(pyramid)
        query_set = self.query_gen(fused.grid, text_feats.words, tokens.mask)
        grid_h, grid_w = fused.grid.shape[0], fused.grid.shape[1]
        stream_feat, queries, trace = self.decoder(
            fused.grid, query_set.queries, text_feats.words, tokens.mask,
            skip_calibration=skip_calibration, collect_attn=collect_attn)
        logits = self.mask_head(stream_feat.reshape(grid_h, grid_w, self.config.width))

        recon = None
        recon_ops = 0
        if training:
            before = ad.op_tally()
            recon = ReconPair(
                reconstructed=self.recon_head(queries),
                projected=self.text_proj(text_feats.words, text_feats.sentence, tokens.mask),
            )
            recon_ops = ad.op_tally() - before
        return ForwardResult(mask_logits=logits, recon=recon, recon_ops=recon_ops,
                             trace=trace, queries=queries, word_attn=query_set.word_attn)
