"""Adam with sparse-by-flow updates and global-norm clipping."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a named parameter dict.

    Only parameters present in the gradient dict are touched; the step count
    (used for bias correction) advances once per :meth:`step` call.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.steps
        corr2 = 1.0 - b2**self.steps
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] = params[name] - self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)

    def state(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "steps": self.steps}

    def load(self, state: dict, m: dict[str, np.ndarray], v: dict[str, np.ndarray]) -> None:
        self.lr = state["lr"]
        self.beta1, self.beta2, self.eps = state["beta1"], state["beta2"], state["eps"]
        self.steps = int(state["steps"])
        self.m = {k: np.array(a) for k, a in m.items()}
        self.v = {k: np.array(a) for k, a in v.items()}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or not np.isfinite(norm):
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
