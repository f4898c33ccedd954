"""Hierarchical cross-entropy over the two-level label hierarchy.

The loss blends a coarse binary term (SE vs NS, obtained by summing the
probability mass of the two SE classes) with the fine 3-class term:

    total = alpha * coarse + (1 - alpha) * fine

where each term is a hard-target cross-entropy -log p(target) at its
level, natural logarithm throughout. ``alpha`` defaults to 0.5.

The coarse distribution is always the marginal of the fine one (single
3-way head), so the two levels can never disagree. Probabilities are
clamped to ``CLAMP_EPS`` before the log so saturated inputs stay
finite; gradients are of the unclamped loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .taxonomy import FINE_INDEX, FINE_ORDER, FineLabel, severity

CLAMP_EPS = 1e-12
_SUM_TOL = 1e-9
DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class Prob3:
    """Distribution over (sexual activity, sexual posing, neutral)."""

    p_activity: float
    p_posing: float
    p_neutral: float

    def __post_init__(self) -> None:
        comps = (self.p_activity, self.p_posing, self.p_neutral)
        if any(not math.isfinite(c) or c < 0.0 for c in comps):
            raise ValidationError(f"Prob3 components must be finite and >= 0: {comps}")
        if abs(sum(comps) - 1.0) > _SUM_TOL:
            raise ValidationError(f"Prob3 components must sum to 1: {comps}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_activity, self.p_posing, self.p_neutral], dtype=np.float64)

    def __getitem__(self, label: FineLabel) -> float:
        return (self.p_activity, self.p_posing, self.p_neutral)[FINE_INDEX[label]]


@dataclass(frozen=True)
class Prob2:
    """Distribution over (SE, NS)."""

    p_se: float
    p_ns: float

    def __post_init__(self) -> None:
        comps = (self.p_se, self.p_ns)
        if any(not math.isfinite(c) or c < 0.0 for c in comps):
            raise ValidationError(f"Prob2 components must be finite and >= 0: {comps}")
        if abs(self.p_se + self.p_ns - 1.0) > _SUM_TOL:
            raise ValidationError(f"Prob2 components must sum to 1: {comps}")


@dataclass(frozen=True)
class Logits3:
    """Unnormalized scores in the canonical fine-label order."""

    z_activity: float
    z_posing: float
    z_neutral: float

    def __post_init__(self) -> None:
        comps = (self.z_activity, self.z_posing, self.z_neutral)
        if any(not math.isfinite(c) for c in comps):
            raise ValidationError(f"logits must be finite: {comps}")

    def as_array(self) -> np.ndarray:
        return np.array([self.z_activity, self.z_posing, self.z_neutral], dtype=np.float64)


@dataclass(frozen=True)
class LossValue:
    """Loss breakdown; ``total`` honors the alpha blend by construction."""

    total: float
    coarse_term: float
    fine_term: float
    alpha: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1]: {self.alpha}")
        if min(self.total, self.coarse_term, self.fine_term) < 0.0:
            raise ValidationError("loss terms must be non-negative")
        blended = self.alpha * self.coarse_term + (1.0 - self.alpha) * self.fine_term
        if abs(self.total - blended) > _SUM_TOL:
            raise ValidationError("total does not equal the alpha blend of its terms")


def _check_alpha(alpha: float) -> None:
    if not (math.isfinite(alpha) and 0.0 <= alpha <= 1.0):
        raise ValidationError(f"alpha must be in [0, 1]: {alpha}")


def project_fine_to_coarse(d: Prob3) -> Prob2:
    """Marginalize the fine distribution onto (SE, NS): the SE mass is
    activity + posing, the NS mass is neutral."""
    return Prob2(p_se=d.p_activity + d.p_posing, p_ns=d.p_neutral)


def softmax(z: Logits3) -> Prob3:
    """Numerically stable softmax of the three logits."""
    arr = z.as_array()
    arr -= arr.max()
    e = np.exp(arr)
    p = e / e.sum()
    return Prob3(float(p[0]), float(p[1]), float(p[2]))


def hierarchical_ce(d: Prob3, target: FineLabel, alpha: float = DEFAULT_ALPHA) -> LossValue:
    """Hierarchical cross-entropy of a fine distribution against a hard target.

    fine term   = -log p(target)
    coarse term = -log p(SE or NS group of the target) on the marginal
    total       = alpha * coarse + (1 - alpha) * fine
    """
    _check_alpha(alpha)
    fine_p = max(d[target], CLAMP_EPS)
    coarse = project_fine_to_coarse(d)
    coarse_p = max(coarse.p_ns if target is FineLabel.NEUTRAL else coarse.p_se, CLAMP_EPS)
    fine_term = -math.log(fine_p)
    coarse_term = -math.log(coarse_p)
    total = alpha * coarse_term + (1.0 - alpha) * fine_term
    return LossValue(total=total, coarse_term=coarse_term, fine_term=fine_term, alpha=alpha)


def hierarchical_ce_from_logits(
    z: Logits3, target: FineLabel, alpha: float = DEFAULT_ALPHA
) -> LossValue:
    """Hierarchical cross-entropy of raw logits (softmax then blend)."""
    return hierarchical_ce(softmax(z), target, alpha)


def hierarchical_ce_grad(
    z: Logits3, target: FineLabel, alpha: float = DEFAULT_ALPHA
) -> np.ndarray:
    """Analytic gradient of ``hierarchical_ce_from_logits`` w.r.t. the logits.

    With p = softmax(z), t the target index and m the indicator of the
    target's coarse group:

        fine grad   = p - onehot(t)
        coarse grad = p - p * m / sum(p * m)

    The blend mirrors the loss. Returned as a float64 array of length 3
    in the canonical fine-label order.
    """
    _check_alpha(alpha)
    losses, grads = batch_hierarchical_ce_from_logits(
        z.as_array()[None, :], np.array([FINE_INDEX[target]]), alpha
    )
    del losses
    return grads[0]


def batch_hierarchical_ce_from_logits(
    logits: np.ndarray, target_indices: np.ndarray, alpha: float = DEFAULT_ALPHA
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized loss and gradient for a batch of logit rows.

    ``logits`` is (N, 3) float, ``target_indices`` (N,) ints in canonical
    order. Returns (losses (N,), gradients (N, 3)). The scalar API
    delegates here, so both paths share one arithmetic.
    """
    _check_alpha(alpha)
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 3:
        raise ValidationError(f"logits batch must have shape (N, 3), got {z.shape}")
    if not np.isfinite(z).all():
        raise ValidationError("logits must be finite")
    targets = np.asarray(target_indices)
    n = z.shape[0]

    z_shift = z - z.max(axis=1, keepdims=True)
    e = np.exp(z_shift)
    p = e / e.sum(axis=1, keepdims=True)

    rows = np.arange(n)
    onehot = np.zeros_like(p)
    onehot[rows, targets] = 1.0

    # Group membership mask: SE = {activity, posing}, NS = {neutral}.
    neutral_target = targets == FINE_INDEX[FineLabel.NEUTRAL]
    mask = np.empty_like(p)
    mask[:, 0] = mask[:, 1] = ~neutral_target
    mask[:, 2] = neutral_target

    p_fine = p[rows, targets]
    p_group = (p * mask).sum(axis=1)

    fine_term = -np.log(np.maximum(p_fine, CLAMP_EPS))
    coarse_term = -np.log(np.maximum(p_group, CLAMP_EPS))
    losses = alpha * coarse_term + (1.0 - alpha) * fine_term

    fine_grad = p - onehot
    coarse_grad = p - p * mask / p_group[:, None]
    grads = alpha * coarse_grad + (1.0 - alpha) * fine_grad
    return losses, grads


def argmax_label(d: Prob3) -> FineLabel:
    """Most probable fine label; exact ties go to the higher severity."""
    probs = (d.p_activity, d.p_posing, d.p_neutral)
    return max(FINE_ORDER, key=lambda lbl: (probs[FINE_INDEX[lbl]], severity(lbl)))
