"""Training objectives: likelihood, local and global attention-variance losses.

All losses take a :class:`DecodeTrace`. Unbatched traces carry refined
attention of shape ``(T, D)``; batched ones ``(B, T, D)`` with masks for padded
steps and source positions. Batched losses are computed per example and then
averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_EPS = 1e-6
LAMBDA_LOCAL = 0.3
LAMBDA_GLOBAL = 0.1


@dataclass
class DecodeTrace:
    refined: Tensor  # a_t^r, unnormalised
    gold_logprob: Tensor | None = None  # log p(y_t* | x)
    step_mask: np.ndarray | None = None
    source_mask: np.ndarray | None = None

    def __post_init__(self):
        self.refined = ad.as_tensor(self.refined)
        if self.gold_logprob is not None:
            self.gold_logprob = ad.as_tensor(self.gold_logprob)
        if self.refined.ndim not in (2, 3):
            raise ValueError(f"refined attention must be (T, D) or (B, T, D), got {self.refined.shape}")
        if self.refined.shape[-2] < 1 or self.refined.shape[-1] < 1:
            raise ValueError("trace needs at least one step and one source position")

    @property
    def batched(self) -> bool:
        return self.refined.ndim == 3

    def _masks(self):
        B = self.refined.shape[0] if self.batched else 1
        T, D = self.refined.shape[-2:]
        step = np.ones((B, T), bool) if self.step_mask is None else np.asarray(self.step_mask, bool).reshape(B, T)
        src = np.ones((B, D), bool) if self.source_mask is None else np.asarray(self.source_mask, bool).reshape(B, D)
        return step, src

    def _refined3(self) -> Tensor:
        r = self.refined
        return r if self.batched else r.reshape(1, *r.shape)


@dataclass
class LossBreakdown:
    mle: float
    local: float
    global_: float
    total: float
    lambda_local: float
    lambda_global: float


def median(values) -> float:
    """Median of a non-empty sequence (mean of the middle pair for even length)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("median of an empty sequence")
    return float(ad.median(Tensor(values)).data)


def local_variance_per_step(trace: DecodeTrace) -> Tensor:
    """Median-centred population variance of each step's refined attention, (B, T)."""
    step, src = trace._masks()
    ar = trace._refined3()
    B, T, D = ar.shape
    mask3 = np.broadcast_to(src[:, None, :], (B, T, D))
    med = ad.median(ar, mask=mask3)
    dev = (ar - med.reshape(B, T, 1)) * mask3.astype(np.float64)
    n = src.sum(axis=1).astype(np.float64).reshape(B, 1)
    return ad.square(dev).sum(axis=-1) / n


def local_variance_loss(trace: DecodeTrace, eps: float = DEFAULT_EPS) -> Tensor:
    """Mean over steps of 1 / (variance + eps); small when attention is peaked."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    step, _ = trace._masks()
    var = local_variance_per_step(trace)
    inv = ad.reciprocal(var + eps) * step.astype(np.float64)
    per_example = inv.sum(axis=-1) / step.sum(axis=1).astype(np.float64)
    return per_example.mean()


def accumulated_gap(trace: DecodeTrace) -> tuple[Tensor, Tensor]:
    """Accumulated attention per position and its excess over the peak step.

    Returns (A, g), both (B, D): ``A_i = sum_t a^r_ti`` and ``g_i = A_i - max_t a^r_ti``.
    """
    step, _ = trace._masks()
    ar = trace._refined3() * step[:, :, None].astype(np.float64)
    acc = ar.sum(axis=1)
    # refined attention is nonnegative, so zeroed padding steps never win the max
    peak = ad.tmax(ar, axis=1)
    return acc, acc - peak


def global_variance_loss(trace: DecodeTrace) -> Tensor:
    """Median-centred variance over source positions of the repeat gap g."""
    _, src = trace._masks()
    _, g = accumulated_gap(trace)
    B, D = g.shape
    med = ad.median(g, mask=src)
    dev = (g - med.reshape(B, 1)) * src.astype(np.float64)
    per_example = ad.square(dev).sum(axis=-1) / src.sum(axis=1).astype(np.float64)
    return per_example.mean()


def mle_loss(trace: DecodeTrace) -> Tensor:
    """Mean negative log-likelihood of the gold tokens (per example, then batch)."""
    if trace.gold_logprob is None:
        raise ValueError("trace has no gold log-probabilities")
    step, _ = trace._masks()
    lp = trace.gold_logprob
    lp = lp if lp.ndim == 2 else lp.reshape(1, -1)
    per_example = -(lp * step.astype(np.float64)).sum(axis=-1) / step.sum(axis=1).astype(np.float64)
    return per_example.mean()


def gold_logprob(probs) -> Tensor:
    """log of gold-token probabilities, clamped at 1e-12."""
    return ad.log(ad.clamp_min(ad.as_tensor(probs), 1e-12))


def mixed_loss(
    trace: DecodeTrace,
    lambda_local: float = LAMBDA_LOCAL,
    lambda_global: float = LAMBDA_GLOBAL,
    eps: float = DEFAULT_EPS,
) -> tuple[Tensor, LossBreakdown]:
    """``L_MLE + lambda_local * L_L + lambda_global * L_G`` and its components."""
    if lambda_local < 0 or lambda_global < 0:
        raise ValueError("loss weights must be nonnegative")
    mle = mle_loss(trace)
    local = local_variance_loss(trace, eps)
    glob = global_variance_loss(trace)
    total = mle + lambda_local * local + lambda_global * glob
    breakdown = LossBreakdown(
        mle=mle.item(),
        local=local.item(),
        global_=glob.item(),
        total=total.item(),
        lambda_local=lambda_local,
        lambda_global=lambda_global,
    )
    return total, breakdown


def combine(mle: float, local: float, global_: float, lambda_local: float, lambda_global: float) -> float:
    """Scalar recombination in the same evaluation order as :func:`mixed_loss`."""
    return mle + lambda_local * local + lambda_global * global_
