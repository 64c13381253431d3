"""Desk-scale referring-image-segmentation pipeline, differentiable end to end."""
import os as _os
import sys as _sys

# Single-threaded BLAS keeps runs bitwise reproducible on one machine.
# Only effective if numpy has not been imported yet.
if "numpy" not in _sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, "1")

from .autodiff import Tensor, backward, finite_diff_check, no_grad  # noqa: E402
from .config import Config  # noqa: E402
from .estimator import ReferringSegmenter  # noqa: E402

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_check",
    "no_grad",
    "Config",
    "ReferringSegmenter",
]
__version__ = "0.1.0"
