"""Adam optimizer over named parameter tensors."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import NumericError


class Adam:
    """Standard bias-corrected Adam; state is keyed by parameter name."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(p.data) for name, p in self.params}
        self.second_moment = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, grads: dict[Tensor, Tensor]):
        """One update from a gradient map as returned by `backward`."""
        self.step_count += 1
        t = self.step_count
        correct1 = 1.0 - self.beta1 ** t
        correct2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = grads[p].data
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.first_moment:
            out[f"adam.m/{name}"] = self.first_moment[name]
            out[f"adam.v/{name}"] = self.second_moment[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int):
        self.step_count = step_count
        for name in self.first_moment:
            key_m, key_v = f"adam.m/{name}", f"adam.v/{name}"
            if key_m in arrays:
                self.first_moment[name] = np.asarray(arrays[key_m], dtype=self.first_moment[name].dtype).copy()
            if key_v in arrays:
                self.second_moment[name] = np.asarray(arrays[key_v], dtype=self.second_moment[name].dtype).copy()
