"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import warnings

import numpy as np

from .engine import Tensor
from .errors import NonFiniteGradientWarning, ShapeError


class Adam:
    """Bias-corrected Adam with per-parameter first/second moments.

    A non-finite gradient aborts the whole step (state and params untouched)
    and surfaces a NonFiniteGradientWarning instead of corrupting training.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        """Apply one update from the .grad fields; returns False if skipped."""
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != param {p.data.shape} for {name}")
            if not np.all(np.isfinite(g)):
                warnings.warn(
                    f"non-finite gradient for '{name}'; optimizer step skipped",
                    NonFiniteGradientWarning,
                    stacklevel=2,
                )
                return False
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
        return True

    # -- checkpoint support --------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam/{k}/m": m for k, m in self.m.items()}
        out.update({f"adam/{k}/v": v for k, v in self.v.items()})
        out["adam/t"] = np.asarray(float(self.t), dtype=np.float32)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k in self.params:
            mk, vk = f"adam/{k}/m", f"adam/{k}/v"
            if mk in arrays:
                self.m[k] = np.array(arrays[mk], dtype=self.m[k].dtype).reshape(self.m[k].shape)
            if vk in arrays:
                self.v[k] = np.array(arrays[vk], dtype=self.v[k].dtype).reshape(self.v[k].shape)
        if "adam/t" in arrays:
            self.t = int(round(float(arrays["adam/t"])))
