"""Class-weighted binary cross-entropy between estimated and ground-truth SSMs.

The loss treats the T^2 matrix entries as independent binary classifications
and reweights the positive/negative terms by the ground truth's positive rate
so sparse-structure tracks do not drown the positive class:

    L = - sum_ij (1 - lam) * S_ij * log(S^_ij) + lam * (1 - S_ij) * log(1 - S^_ij)

Estimates are clamped away from {0, 1} before the logarithms; the gradient is
zero at clamped entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ShapeError, ValidationError
from .ssm import BinarySSM


@dataclass(frozen=True)
class LossConfig:
    epsilon_clip: float = 1e-6
    normalize: str = "sum"  # "sum" or "mean" (divide by T^2)

    def __post_init__(self):
        if not 0.0 < self.epsilon_clip < 0.5:
            raise ValidationError(f"epsilon_clip must lie in (0, 0.5), got {self.epsilon_clip}")
        if self.normalize not in ("sum", "mean"):
            raise ValidationError(f"normalize must be 'sum' or 'mean', got {self.normalize!r}")


@dataclass(frozen=True)
class LossValue:
    total: float  # plain sum over all T^2 pairs
    per_pair_mean: float  # total / T^2
    lambda_used: float

    def objective(self, cfg: LossConfig) -> float:
        return self.per_pair_mean if cfg.normalize == "mean" else self.total


def _check_pair(est: np.ndarray, gt: BinarySSM) -> None:
    if est.ndim != 2 or est.shape[0] != est.shape[1]:
        raise ShapeError(f"estimated SSM must be square, got {est.shape}")
    if est.shape != gt.values.shape:
        raise ShapeError(f"estimate {est.shape} does not match ground truth {gt.values.shape}")


def weighted_bce(est: np.ndarray, gt: BinarySSM, cfg: LossConfig = LossConfig()) -> LossValue:
    """Weighted BCE between an estimated SSM and a binary ground truth."""
    est = np.asarray(est)
    _check_pair(est, gt)
    eps = est.dtype.type(cfg.epsilon_clip) if est.dtype.kind == "f" else cfg.epsilon_clip
    clipped = np.clip(est, eps, 1.0 - eps)
    s = gt.values.astype(clipped.dtype)
    lam = clipped.dtype.type(gt.lam)
    terms = (1.0 - lam) * (s * np.log(clipped)) + lam * ((1.0 - s) * np.log1p(-clipped))
    total = -float(np.sum(terms))
    n_pairs = est.shape[0] * est.shape[1]
    return LossValue(total=total, per_pair_mean=total / n_pairs, lambda_used=float(gt.lam))


def weighted_bce_grad(est: np.ndarray, gt: BinarySSM, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of the configured objective with respect to each SSM entry.

    Entries pinned by the epsilon clamp receive zero gradient.
    """
    est = np.asarray(est)
    _check_pair(est, gt)
    eps = cfg.epsilon_clip
    clipped = np.clip(est, eps, 1.0 - eps)
    s = gt.values.astype(clipped.dtype)
    lam = clipped.dtype.type(gt.lam)
    grad = -(1.0 - lam) * s / clipped + lam * (1.0 - s) / (1.0 - clipped)
    active = (est > eps) & (est < 1.0 - eps)
    grad = np.where(active, grad, 0.0).astype(est.dtype if est.dtype.kind == "f" else np.float64)
    if cfg.normalize == "mean":
        grad = grad / grad.size
    return grad


def weighted_bce_tracked(est: dc.Tensor, gt: BinarySSM, cfg: LossConfig = LossConfig()) -> dc.Tensor:
    """Tape op: scalar weighted-BCE objective of an estimated SSM Tensor."""
    value = weighted_bce(est.data, gt, cfg).objective(cfg)
    out = np.asarray(value, dtype=est.data.dtype)

    def backward_fn(g):
        dc.accumulate(est, float(g) * weighted_bce_grad(est.data, gt, cfg))

    return dc.make_node(out, (est,), backward_fn)
