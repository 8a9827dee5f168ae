"""Adagrad with a per-parameter accumulator and global-norm gradient clipping."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .autodiff import Tensor


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
            p._own = True
    return norm


class Adagrad:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.15, initial_accumulator: float = 0.1):
        if lr <= 0 or initial_accumulator < 0:
            raise ValueError("lr must be positive and the accumulator nonnegative")
        self.params = list(params)
        self.lr = lr
        self.accumulators = [np.full_like(p.data, initial_accumulator) for p in self.params]

    def step(self):
        for p, acc in zip(self.params, self.accumulators):
            if p.grad is None:
                continue
            acc += p.grad * p.grad
            p.data -= self.lr * p.grad / np.sqrt(acc)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
