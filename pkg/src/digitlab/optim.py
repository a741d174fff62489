"""AdamW with decoupled weight decay and a linear-warmup schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def warmup_steps(total_steps: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * total_steps))


def linear_warmup_lr(step: int, peak: float, warmup: int) -> float:
    """Linear ramp over the first ``warmup`` steps, then constant at ``peak``.

    ``step`` is zero-based; the last warmup step runs at ``peak``.
    """
    return peak * min(1.0, (step + 1) / warmup)


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            d = p.data
            dt = d.dtype.type
            # decoupled decay acts on the weights, never on the moments
            if self.weight_decay:
                d *= dt(1.0 - lr * self.weight_decay)
            m, v = self.m[k], self.v[k]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            denom = np.sqrt(v / dt(c2))
            denom += dt(self.eps)
            d -= dt(lr / c1) * m / denom

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = arrays["m." + k].copy()
            self.v[k] = arrays["v." + k].copy()
        self.t = t
