"""AdamW and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError
from .tensor import Tensor


def lr_at(step: int, *, base_lr: float, warmup_steps: int, total_steps: int,
          min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr``.

    The schedule is continuous at the joint: step == warmup_steps gives
    exactly ``base_lr`` and step == total_steps gives exactly ``min_lr``.
    """
    if step < 0:
        raise ParameterError("step must be >= 0")
    if warmup_steps >= total_steps:
        raise ParameterError("warmup must end before the schedule does")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def decay_allowed(name: str, param: Tensor) -> bool:
    """Weight decay applies to weight matrices only: biases, norms and
    token/positional embeddings are excluded."""
    if param.data.ndim < 2:
        return False
    lowered = name.lower()
    return not any(s in lowered for s in ("norm", "token", "pos_embed"))


class AdamW:
    """Decoupled weight decay Adam over a dict of named parameters."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def scale_grads(self, factor: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad *= factor

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and decay_allowed(name, p):
                update = update + self.weight_decay * p.data
            p.data -= lr * update
