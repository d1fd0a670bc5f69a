"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Node

__all__ = ["AdamW", "NonFiniteGradientError", "global_norm_clip"]


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN or inf; the step was refused."""


def global_norm_clip(grads: list[np.ndarray], clip: float | None) -> list[np.ndarray]:
    """Scale all gradients so their joint L2 norm is at most ``clip``."""
    if clip is None:
        return grads
    norm_sq = sum(float(np.sum(g * g)) for g in grads)
    norm = math.sqrt(norm_sq)
    if norm <= clip or norm == 0.0:
        return grads
    scale = clip / norm
    return [g * scale for g in grads]


class AdamW:
    """Decoupled-weight-decay Adam over a list of parameter Nodes.

    Defaults follow the common convention: betas (0.9, 0.999),
    eps 1e-8. Clipping, when set, applies to the global gradient norm
    before the moment update; weight decay multiplies the parameter
    directly (never enters the moments).
    """

    def __init__(self, params: list[Node], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite gradient; step refused")
            grads.append(np.asarray(g, dtype=float))
        grads = global_norm_clip(grads, self.clip)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.value -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                  + self.weight_decay * p.value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}
