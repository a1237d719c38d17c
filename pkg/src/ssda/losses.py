"""Loss terms for both training stages.

Stage I combines supervised source cross-entropy with a threshold-gated
consistency term over weak/strong views of unlabeled samples; stage II
combines anchor supervision, soft distillation against teacher predictions,
and optionally the consistency term again.  Every loss returns its scalar
plus the gradient seed at the logits (already carrying the 1/B of the batch
mean), so the model's backward pass turns it into parameter gradients.

Normalisation note: the gated consistency term divides by the full batch
size, not the number of passing samples, so a low pass rate yields a
proportionally small loss.  Soft distillation is applied to every unlabeled
sample with no threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    ForwardCache,
    Gradients,
    ModelParams,
    ShapeError,
    backward,
    forward_batch,
    log_softmax,
    softmax,
)


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.0
    gamma: float = 0.2
    eta: float = 0.8
    mu: float = 0.95
    sigma: float = 0.99
    stage2_consistency_weight: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "gamma", "eta", "mu", "sigma", "stage2_consistency_weight"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 < self.mu <= 1.0:
            raise ValueError(f"mu must lie in (0, 1], got {self.mu}")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        for name in ("alpha", "gamma", "eta", "stage2_consistency_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossValue:
    scalar: float
    grad_at_logits: np.ndarray
    per_sample_mask: np.ndarray | None = None
    cache: ForwardCache | None = None  # forward pass the gradient flows through


@dataclass
class CompositeLoss:
    scalar: float
    terms: tuple[tuple[float, LossValue], ...]  # (weight, term)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError(f"labels must be a vector, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def _mean_cross_entropy(params: ModelParams, features, labels) -> LossValue:
    y = _check_labels(labels, params.arch.num_classes)
    cache = forward_batch(params, features)
    B = cache.logits.shape[0]
    if y.shape[0] != B:
        raise ShapeError(f"{B} feature rows but {y.shape[0]} labels")
    logp = log_softmax(cache.logits)
    scalar = float(-logp[np.arange(B), y].mean())
    grad = (cache.probs - _one_hot(y, params.arch.num_classes)) / B
    return LossValue(scalar=scalar, grad_at_logits=grad, cache=cache)


def supervised_source(params: ModelParams, features, labels) -> LossValue:
    """Mean cross-entropy over a (strong-augmented) labeled source batch."""
    return _mean_cross_entropy(params, features, labels)


def supervised_target(params: ModelParams, features, labels) -> LossValue:
    """Mean cross-entropy over a (strong-augmented) anchor batch."""
    return _mean_cross_entropy(params, features, labels)


def consistency_unlabeled(params: ModelParams, weak_views, strong_views, mu: float) -> LossValue:
    """Threshold-gated pseudo-label consistency between two views.

    The weak view is scored under stop-gradient; samples whose max weak
    probability reaches ``mu`` contribute hard-label cross-entropy on the
    strong view.  Passing nothing is valid and yields a zero loss with zero
    gradients.  Ties in the argmax resolve to the lowest class index.
    """
    weak_views = np.asarray(weak_views, dtype=np.float64)
    strong_views = np.asarray(strong_views, dtype=np.float64)
    if weak_views.shape != strong_views.shape:
        raise ShapeError(
            f"weak views {weak_views.shape} and strong views {strong_views.shape} are misaligned"
        )
    weak_cache = forward_batch(params, weak_views)  # stop-gradient: never backpropagated
    strong_cache = forward_batch(params, strong_views)
    B, C = strong_cache.logits.shape

    max_probs = weak_cache.probs.max(axis=1)
    pseudo = weak_cache.probs.argmax(axis=1)
    mask = max_probs >= mu

    logp_s = log_softmax(strong_cache.logits)
    scalar = float(-(logp_s[np.arange(B), pseudo] * mask).sum() / B)
    grad = (strong_cache.probs - _one_hot(pseudo, C)) / B
    grad[~mask] = 0.0
    return LossValue(scalar=scalar, grad_at_logits=grad, per_sample_mask=mask, cache=strong_cache)


def distillation(teacher_probs_weak, student_logits_strong) -> LossValue:
    """Soft cross-entropy from teacher weak-view distributions to the student.

    Teacher rows are constants (no gradient flows back into the teacher) and
    every row must lie on the probability simplex within 1e-6.  No
    confidence threshold is applied, so below-threshold-but-correct samples
    still supervise the student.
    """
    teacher = np.asarray(teacher_probs_weak, dtype=np.float64)
    logits = np.asarray(student_logits_strong, dtype=np.float64)
    if teacher.shape != logits.shape:
        raise ShapeError(f"teacher probs {teacher.shape} vs student logits {logits.shape}")
    sums = teacher.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or teacher.min() < -1e-9 or teacher.max() > 1.0 + 1e-9:
        raise ValueError("teacher rows must lie on the probability simplex (tolerance 1e-6)")
    B = teacher.shape[0]
    logp = log_softmax(logits)
    scalar = float(-(teacher * logp).sum() / B)
    grad = (softmax(logits) - teacher) / B
    return LossValue(scalar=scalar, grad_at_logits=grad)


def uda_composite(loss_s: LossValue, loss_u: LossValue | None, alpha: float) -> CompositeLoss:
    """Stage-I objective: supervised source term plus alpha-weighted consistency."""
    terms: list[tuple[float, LossValue]] = [(1.0, loss_s)]
    scalar = loss_s.scalar
    if loss_u is not None:
        terms.append((alpha, loss_u))
        scalar += alpha * loss_u.scalar
    elif alpha != 0.0:
        raise ValueError("alpha is non-zero but no consistency term was supplied")
    return CompositeLoss(scalar=float(scalar), terms=tuple(terms))


def ssl_composite(
    loss_t: LossValue,
    loss_d: LossValue,
    loss_u: LossValue | None,
    gamma: float,
    eta: float,
    lambda_u: float,
) -> CompositeLoss:
    """Stage-II objective: gamma*anchors + eta*distillation (+ lambda_u*consistency)."""
    terms: list[tuple[float, LossValue]] = [(gamma, loss_t), (eta, loss_d)]
    scalar = gamma * loss_t.scalar + eta * loss_d.scalar
    if loss_u is not None:
        terms.append((lambda_u, loss_u))
        scalar += lambda_u * loss_u.scalar
    return CompositeLoss(scalar=float(scalar), terms=tuple(terms))


def composite_gradients(params: ModelParams, composite: CompositeLoss) -> Gradients:
    """Backpropagate each weighted term through its own forward cache and sum."""
    total = Gradients.zeros(params)
    for weight, term in composite.terms:
        if weight == 0.0:
            continue
        if term.cache is None:
            raise ValueError("loss term carries no forward cache to backpropagate through")
        total.axpy(backward(params, term.cache, term.grad_at_logits), weight)
    return total
