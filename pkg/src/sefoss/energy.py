"""Open-set scoring: free energy, softmax confidence, adaptive thresholds, AUROC.

Scores follow one orientation throughout: higher means "more likely OOD".
The free energy already behaves that way; confidence is negated before it is
ranked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, row_log_sum_exp, scale


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    tau_id: float
    tau_ood: float
    m_ood: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.tau_id, self.tau_ood, self.m_ood)


@dataclass(frozen=True)
class EnergyConfig:
    beta: float = 1.0
    scale_id: float = 0.2
    scale_ood_threshold: float = 1.3
    scale_ood_margin: float = 1.9

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        for name in ("scale_id", "scale_ood_threshold", "scale_ood_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _values(logits) -> np.ndarray:
    if isinstance(logits, Tensor):
        return logits.values
    arr = np.asarray(logits, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _lse(v: np.ndarray) -> np.ndarray:
    shift = v.max(axis=1, keepdims=True)
    return (shift + np.log(np.exp(v - shift).sum(axis=1, keepdims=True)))[:, 0]


def free_energy_score(logits, beta: float = 1.0) -> np.ndarray:
    """-(1/beta) * log(sum_j exp(beta * logit_j)) for every row."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    return -_lse(beta * _values(logits)) / beta


def free_energy_tensor(logits: Tensor, beta: float = 1.0) -> Tensor:
    """Differentiable free energy, shape nx1."""
    if beta == 1.0:
        return scale(row_log_sum_exp(logits), -1.0)
    return scale(row_log_sum_exp(scale(logits, beta)), -1.0 / beta)


def softmax(logits) -> np.ndarray:
    v = _values(logits)
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_confidence(logits) -> np.ndarray:
    """Largest softmax probability of each row."""
    return softmax(logits).max(axis=1)


def calibrate_thresholds(labeled_scores: Sequence[float], cfg: EnergyConfig = EnergyConfig()) -> Thresholds:
    """Thresholds from the median and interquartile range of labeled-set energies.

    Quartiles use linear interpolation between order statistics (numpy's
    default, R type 7).
    """
    scores = np.asarray(labeled_scores, dtype=np.float64).ravel()
    if scores.size < 4:
        raise CalibrationError(f"need at least 4 labeled scores, got {scores.size}")
    if not np.all(np.isfinite(scores)):
        raise CalibrationError("labeled scores contain non-finite values")
    q1, median, q3 = np.quantile(scores, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    return Thresholds(
        tau_id=float(median - iqr * cfg.scale_id),
        tau_ood=float(median + iqr * cfg.scale_ood_threshold),
        m_ood=float(median + iqr * cfg.scale_ood_margin),
    )


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """P(OOD score > ID score) over all pairs, ties counted as one half.

    Mann-Whitney form with mid-ranks for tied values.
    """
    id_arr = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_arr = np.asarray(ood_scores, dtype=np.float64).ravel()
    n_id, n_ood = id_arr.size, ood_arr.size
    if n_id == 0 or n_ood == 0:
        raise ValueError("auroc needs non-empty ID and OOD score lists")
    pooled = np.concatenate([id_arr, ood_arr])
    order = np.argsort(pooled, kind="mergesort")
    sorted_vals = pooled[order]
    ranks = np.empty(pooled.size)
    # mid-rank for each run of equal values
    boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [pooled.size]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    ood_rank_sum = ranks[n_id:].sum()
    return float((ood_rank_sum - n_ood * (n_ood + 1) / 2.0) / (n_id * n_ood))

