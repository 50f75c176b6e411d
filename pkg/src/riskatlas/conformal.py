"""Threshold calibration under an average-error budget, and set prediction.

The prediction set at threshold lambda keeps every species whose
estimated probability reaches lambda (the >= rule, applied everywhere).
Calibration maximizes lambda subject to the empirical miss rate on
held-out true-class probabilities staying within epsilon.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .domain import Assemblage


@dataclass(frozen=True)
class SetSizeSummary:
    """Distribution summary of prediction-set sizes."""

    mean: float
    std: float
    min: float
    q25: float
    median: float
    q75: float
    max: float

    @classmethod
    def from_sizes(cls, sizes):
        sizes = np.asarray(sizes, dtype=np.float64)
        if sizes.size == 0:
            raise ValueError("no sizes to summarize")
        q25, med, q75 = np.percentile(sizes, [25, 50, 75])
        return cls(
            mean=float(sizes.mean()),
            std=float(sizes.std()),
            min=float(sizes.min()),
            q25=float(q25),
            median=float(med),
            q75=float(q75),
            max=float(sizes.max()),
        )


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of :func:`calibrate`.

    ``empirical_error`` is the miss rate the chosen threshold attains on
    the calibration data itself (always <= ``epsilon``);
    ``mean_set_size`` is filled in by the reporting step once a model
    and evaluation inputs are available.
    """

    lam: float
    epsilon: float
    empirical_error: float
    n_calibration: int
    mean_set_size: float | None = None
    set_sizes: SetSizeSummary | None = None

    def with_set_sizes(self, summary):
        return replace(self, mean_set_size=summary.mean, set_sizes=summary)


def error_rate(true_probs, lam):
    """Fraction of true-class probabilities strictly below ``lam``.

    With the >= membership rule, an entry below the threshold is exactly
    a sample whose true species is missing from the prediction set.
    """
    true_probs = np.asarray(true_probs, dtype=np.float64)
    if true_probs.size == 0:
        raise ValueError("empty probability vector")
    return float((true_probs < lam).mean())


def calibrate(true_probs, epsilon):
    """Largest threshold whose empirical error stays within ``epsilon``.

    With sorted probabilities p(1) <= ... <= p(n) and m = floor(epsilon
    * n), the threshold is p(m+1), or 1 when m >= n. The error function
    only changes at observed values, so restricting candidates to
    {p(1), ..., p(n), 1} is lossless and the result is exactly the
    maximizer over that set.

    Notes
    -----
    The reported ``empirical_error`` is the attained miss rate at the
    chosen threshold. With all-distinct probabilities it equals m/n;
    under ties it can be smaller, and the attained rate is the value
    that keeps the result self-consistent with :func:`error_rate`.
    """
    true_probs = np.asarray(true_probs, dtype=np.float64)
    if true_probs.size == 0:
        raise ValueError("empty calibration set")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    n = true_probs.size
    m = int(np.floor(epsilon * n))
    if m >= n:
        lam = 1.0
    else:
        lam = float(np.sort(true_probs)[m])
    return CalibrationResult(
        lam=lam,
        epsilon=float(epsilon),
        empirical_error=error_rate(true_probs, lam),
        n_calibration=int(n),
    )


def predict_set(eta_hat, lam):
    """Species whose probability reaches ``lam``, with raw weights.

    Weights are copied unnormalized; renormalization happens after the
    geographic filter. The result may be empty.
    """
    eta_hat = np.asarray(eta_hat, dtype=np.float64)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    members = np.flatnonzero(eta_hat >= lam).astype(np.int32)
    return Assemblage.from_arrays(members, eta_hat[members])


def set_sizes(probs, lam):
    """Per-row prediction-set sizes for a (B, C) probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    return (probs >= lam).sum(axis=1)


def mean_set_size(model, features, lam):
    """Mean prediction-set size of ``model`` over raw feature rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValueError("no inputs")
    return float(set_sizes(model.predict_proba_batch(features), lam).mean())


def set_size_summary(model, features, lam):
    """Full size-distribution summary over raw feature rows."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValueError("no inputs")
    return SetSizeSummary.from_sizes(set_sizes(model.predict_proba_batch(features), lam))
