"""Adam over a list of parameter tensors."""

from __future__ import annotations

import numpy as np

from wavediff.nn.tensor import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr == 0.0:
                continue
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update.astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None)
        return total**0.5

    def state_flat(self) -> tuple[int, np.ndarray, np.ndarray]:
        return (
            self.step_count,
            np.concatenate([m.ravel() for m in self.m]),
            np.concatenate([v.ravel() for v in self.v]),
        )

    def load_state_flat(self, step: int, m_flat: np.ndarray, v_flat: np.ndarray):
        pos = 0
        for i, p in enumerate(self.params):
            n = p.data.size
            self.m[i] = m_flat[pos : pos + n].reshape(p.shape).astype(p.dtype)
            self.v[i] = v_flat[pos : pos + n].reshape(p.shape).astype(p.dtype)
            pos += n
        self.step_count = int(step)
