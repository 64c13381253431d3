"""Estimator-style wrapper so the pipeline composes with common tooling.

`ReferringSegmenter` follows the scikit-learn protocol by duck typing:
constructor arguments are stored verbatim, `get_params`/`set_params`
introspect the constructor, `fit` trains, `predict` emits binary masks
and `score` reports mean IoU. No scikit-learn import is required; the
class works with `sklearn.base.clone` and pipeline utilities as-is.
"""
from __future__ import annotations

import inspect

import numpy as np

from .config import Config
from .data import SampleRecord
from .encoders import TokenSeq
from .errors import ContractError, DimensionError
from .metrics import MetricReport
from .train import TrainResult, evaluate, predict_mask, train


def check_records(records, image_size: int | None = None) -> list[SampleRecord]:
    """Validate a batch of samples: shapes, value ranges, token layout."""
    records = list(records)
    if not records:
        raise ContractError("need at least one sample record")
    for i, rec in enumerate(records):
        image = np.asarray(rec.image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionError(f"record {i}: image must be [H,W,3], got {image.shape}")
        if image.shape[0] % 16 or image.shape[1] % 16:
            raise DimensionError(f"record {i}: image extents must divide by 16, got {image.shape}")
        if image_size is not None and image.shape[:2] != (image_size, image_size):
            raise DimensionError(
                f"record {i}: expected {image_size}x{image_size} images, got {image.shape}")
        if float(image.min()) < 0.0 or float(image.max()) > 1.0:
            raise ContractError(f"record {i}: image values must lie in [0, 1]")
        mask = np.asarray(rec.gt_mask)
        if mask.shape != image.shape[:2]:
            raise DimensionError(
                f"record {i}: mask {mask.shape} does not match image {image.shape[:2]}")
        if not np.isin(mask, (0, 1)).all():
            raise ContractError(f"record {i}: mask must be binary")
        if not isinstance(rec.tokens, TokenSeq):
            raise ContractError(f"record {i}: tokens must be a TokenSeq")
        rec.tokens.validate()
    return records


def check_is_fitted(estimator: "ReferringSegmenter"):
    if getattr(estimator, "model_", None) is None:
        raise ContractError("this ReferringSegmenter instance is not fitted yet")


class ReferringSegmenter:
    """fit/predict interface over the full training harness."""

    def __init__(self, width=64, heads=4, ffn_width=128, decoder_layers=3,
                 num_queries=8, stage_channels=(16, 32, 64, 128), text_blocks=2,
                 max_len=20, cdec_enabled=True, share_qgm_params=False,
                 precision="float32", seg_weight=1.0, recon_weight=0.1,
                 lr=1e-3, epochs=300, batch_size=8, eval_every=1, seed=1):
        self.width = width
        self.heads = heads
        self.ffn_width = ffn_width
        self.decoder_layers = decoder_layers
        self.num_queries = num_queries
        self.stage_channels = stage_channels
        self.text_blocks = text_blocks
        self.max_len = max_len
        self.cdec_enabled = cdec_enabled
        self.share_qgm_params = share_qgm_params
        self.precision = precision
        self.seg_weight = seg_weight
        self.recon_weight = recon_weight
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.seed = seed
        self.model_ = None
        self.config_ = None
        self.runlog_ = None

    @classmethod
    def _param_names(cls) -> list[str]:
        signature = inspect.signature(cls.__init__)
        return [name for name in signature.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "ReferringSegmenter":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ContractError(f"invalid parameter {key!r} for ReferringSegmenter")
            setattr(self, key, value)
        return self

    def _build_config(self, records) -> Config:
        image_size = int(np.asarray(records[0].image).shape[0])
        return Config(width=self.width, heads=self.heads, ffn_width=self.ffn_width,
                      decoder_layers=self.decoder_layers, num_queries=self.num_queries,
                      stage_channels=tuple(self.stage_channels), text_blocks=self.text_blocks,
                      max_len=self.max_len, cdec_enabled=self.cdec_enabled,
                      share_qgm_params=self.share_qgm_params, precision=self.precision,
                      seg_weight=self.seg_weight, recon_weight=self.recon_weight,
                      lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                      eval_every=self.eval_every, image_size=image_size,
                      train_size=len(records), model_seed=self.seed)

    def fit(self, X, y=None) -> "ReferringSegmenter":
        """Train on sample records; `y` is accepted for API compatibility."""
        records = check_records(X)
        config = self._build_config(records)
        result: TrainResult = train(config, train_samples=records)
        self.model_ = result.model
        self.config_ = config
        self.runlog_ = result.runlog
        return self

    def predict(self, X) -> list[np.ndarray]:
        """Binary masks for each record, at input resolution."""
        check_is_fitted(self)
        records = check_records(X, image_size=self.config_.image_size)
        return [predict_mask(self.model_, rec) for rec in records]

    def score(self, X, y=None) -> float:
        """Mean IoU against the records' ground-truth masks."""
        check_is_fitted(self)
        records = check_records(X, image_size=self.config_.image_size)
        return evaluate(self.model_, records).miou

    def report(self, X) -> MetricReport:
        check_is_fitted(self)
        records = check_records(X, image_size=self.config_.image_size)
        return evaluate(self.model_, records)
