"""AdamW with cosine learning-rate decay and global-norm clipping."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        k = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * k
    return total


class AdamW:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3, weight_decay: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, total_steps: int | None = None):
        self.params = list(params)
        self.base_lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.total_steps = total_steps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def lr_at(self, step: int) -> float:
        if not self.total_steps:
            return self.base_lr
        frac = min(step / self.total_steps, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self) -> None:
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1**t
        c2 = 1.0 - self.b2**t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * (update + self.weight_decay * p.data)).astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step: int) -> None:
        for name in self.m:
            self.m[name] = np.asarray(state[f"m.{name}"]).astype(self.m[name].dtype).copy()
            self.v[name] = np.asarray(state[f"v.{name}"]).astype(self.v[name].dtype).copy()
        self.step_count = step
