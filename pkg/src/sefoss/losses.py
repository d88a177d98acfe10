"""The five training losses and their weighted sum.

Stop-gradient rules:
  * self-supervision: weak-view features are constant targets;
  * pseudo-labeling: weak-view logits only choose the target class and the mask;
  * energy regularization: gradients do flow through the weak-view logits,
    and nothing from the strong view enters it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .energy import free_energy_score, free_energy_tensor, softmax_confidence
from .tensor import (Tensor, add, max_with_constant, mul, reduce_sum, row_cosine,
                     row_log_sum_exp, scale, square, sub)


class LabelError(ValueError):
    pass


@dataclass
class LossBreakdown:
    l_l: float
    l_p: float
    l_s: float
    l_e: float
    l_w: float
    total: float
    inlier_mask_count: int = 0
    outlier_mask_count: int = 0
    weights: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def resum(self) -> float:
        w_p, w_s, w_e, w_w = self.weights
        return self.l_l + w_p * self.l_p + w_s * self.l_s + w_e * self.l_e + w_w * self.l_w


def _zero() -> Tensor:
    return Tensor(0.0)


def cross_entropy_rows(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """H(onehot, softmax(logits)) per row, shape nx1."""
    picked = reduce_sum(mul(logits, Tensor(onehot)), axis=1)
    return sub(row_log_sum_exp(logits), picked)


def onehot(indices: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(indices), num_classes))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def argmax_onehot(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return onehot(np.argmax(logits, axis=1), logits.shape[1])


def supervised_loss(logits: Tensor, onehot_labels: np.ndarray) -> Tensor:
    labels = np.asarray(onehot_labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise LabelError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if not (np.all((labels == 0.0) | (labels == 1.0)) and np.all(labels.sum(axis=1) == 1.0)):
        raise LabelError("labels must be one-hot rows")
    return scale(reduce_sum(cross_entropy_rows(logits, labels)), 1.0 / logits.shape[0])


def self_supervised_loss(h_of_v: Tensor, z: Tensor) -> Tensor:
    """Negative mean cosine similarity; ``z`` is always treated as a constant."""
    target = z.detach() if isinstance(z, Tensor) else Tensor(z)
    n = h_of_v.shape[0]
    if n == 0:
        return _zero()
    return scale(reduce_sum(row_cosine(h_of_v, target)), -1.0 / n)


def pseudo_inlier_mask(logits_weak, tau_id: float, beta: float = 1.0) -> np.ndarray:
    return free_energy_score(logits_weak, beta) < tau_id


def pseudo_outlier_mask(logits_weak, tau_ood: float, beta: float = 1.0) -> np.ndarray:
    return free_energy_score(logits_weak, beta) > tau_ood


def confident_mask(logits_weak, threshold: float) -> np.ndarray:
    """Confidence-based selection used by the FixMatch-style baseline."""
    return softmax_confidence(logits_weak) >= threshold


def pseudo_label_loss(logits_weak, logits_strong: Tensor, tau_id: float | None = None,
                      beta: float = 1.0, mask: np.ndarray | None = None) -> tuple[Tensor, int]:
    """Hard pseudo-labels from the weak view applied to the strong view.

    Normalized by the full unlabeled batch size, not by the number selected.
    Pass ``mask`` to override the energy-based selection.
    """
    weak = logits_weak.values if isinstance(logits_weak, Tensor) else np.asarray(logits_weak, float)
    n = weak.shape[0]
    if mask is None:
        if tau_id is None:
            raise ValueError("either tau_id or mask is required")
        mask = pseudo_inlier_mask(weak, tau_id, beta)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    count = int(mask.sum())
    if n == 0 or count == 0:
        return _zero(), 0
    targets = argmax_onehot(weak)
    per_row = cross_entropy_rows(logits_strong, targets)
    masked = mul(per_row, Tensor(mask.astype(np.float64).reshape(-1, 1)))
    return scale(reduce_sum(masked), 1.0 / n), count


def energy_reg_loss(logits_weak: Tensor, tau_ood: float, m_ood: float,
                    beta: float = 1.0) -> tuple[Tensor, int]:
    """Squared hinge pushing pseudo-outlier energies up to the margin.

    Averaged over the selected samples; zero when none are selected.
    """
    energy = free_energy_tensor(logits_weak, beta)
    selected = energy.values[:, 0] > tau_ood
    count = int(selected.sum())
    if count == 0:
        return _zero(), 0
    gap = max_with_constant(add(scale(energy, -1.0), float(m_ood)), 0.0)
    masked = mul(square(gap), Tensor(selected.astype(np.float64).reshape(-1, 1)))
    return scale(reduce_sum(masked), 1.0 / count), count


def weight_decay_loss(params: Mapping[str, Tensor]) -> Tensor:
    """Half the squared norm of every weight matrix; biases are excluded."""
    total = None
    for name, t in params.items():
        if not name.endswith(".weight"):
            continue
        term = reduce_sum(square(t))
        total = term if total is None else add(total, term)
    return _zero() if total is None else scale(total, 0.5)


def total_loss(components: Mapping[str, Tensor], w_p: float, w_s: float, w_e: float, w_w: float,
               inlier_mask_count: int = 0, outlier_mask_count: int = 0) -> LossBreakdown:
    """l_l + w_p*l_p + w_s*l_s + w_e*l_e + w_w*l_w.

    Terms with zero weight are kept out of the graph. The float total is the
    value of the graph root.
    """
    for w in (w_p, w_s, w_e, w_w):
        if w < 0:
            raise ValueError("loss weights must be non-negative")
    root = components["l_l"]
    for key, w in (("l_p", w_p), ("l_s", w_s), ("l_e", w_e), ("l_w", w_w)):
        if w != 0.0:
            root = add(root, scale(components[key], w))
    values = {k: components[k].item() for k in ("l_l", "l_p", "l_s", "l_e", "l_w")}
    return LossBreakdown(**values, total=root.item(), inlier_mask_count=inlier_mask_count,
                         outlier_mask_count=outlier_mask_count, weights=(w_p, w_s, w_e, w_w),
                         graph=root)
