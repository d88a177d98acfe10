"""Finite-difference self-test of every loss term on small random instances.

Instances are resampled until every relu pre-activation and every mask or
hinge decision sits well away from its switching point, so central
differences never straddle a kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import free_energy_score
from .losses import (energy_reg_loss, onehot, pseudo_label_loss, self_supervised_loss,
                     supervised_loss, total_loss, weight_decay_loss)
from .network import forward_features, forward_logits, init_params, predict_logits, project
from .tensor import Tensor, grad_check

TERMS = ("l_l", "l_s", "l_p", "l_e", "l_w", "composite")
COMPOSITE_WEIGHTS = (1.0, 5.0, 0.5, 0.01)  # w_p, w_s, w_e, w_w
KINK_CLEARANCE = 1e-2


@dataclass
class Instance:
    params: dict[str, np.ndarray]
    x_lab: np.ndarray
    y_lab: np.ndarray
    x_weak: np.ndarray
    x_strong: np.ndarray
    tau_id: float
    tau_ood: float
    m_ood: float


def _preactivations(params, x) -> list[np.ndarray]:
    out, pre = x, []
    depth = sum(1 for k in params if k.startswith("f.") and k.endswith(".weight"))
    for i in range(depth - 1):
        out = out @ params[f"f.{i}.weight"] + params[f"f.{i}.bias"]
        pre.append(out)
        out = np.maximum(out, 0.0)
    return pre


def _split_threshold(scores: np.ndarray) -> tuple[float, float]:
    """Midpoint of the widest gap between consecutive sorted scores, and the gap."""
    s = np.sort(scores)
    gaps = np.diff(s)
    i = int(np.argmax(gaps))
    return 0.5 * (s[i] + s[i + 1]), float(gaps[i])


def make_instance(rng: np.random.Generator, D: int = 3, hidden=(4,), d: int = 3, C: int = 3,
                  B: int = 4, n_unlabeled: int = 6, max_tries: int = 1000) -> Instance:
    for _ in range(max_tries):
        p = dict(init_params(int(rng.integers(2**31)), D, hidden, d, C).items())
        for k in p:
            if k.endswith(".bias"):
                p[k] = rng.normal(scale=0.5, size=p[k].shape)
        x_lab = rng.normal(size=(B, D))
        x_weak = rng.normal(size=(n_unlabeled, D))
        x_strong = x_weak + 0.3 * rng.normal(size=(n_unlabeled, D))
        pre = _preactivations(p, np.concatenate([x_lab, x_weak, x_strong]))
        if any(np.abs(a).min() < KINK_CLEARANCE for a in pre):
            continue
        weak_logits = predict_logits(p, x_weak)
        top2 = np.sort(weak_logits, axis=1)[:, -2:]
        if np.min(top2[:, 1] - top2[:, 0]) < KINK_CLEARANCE:
            continue
        # saturated softmax rows make the cross-entropy gradients tiny and the
        # central differences roundoff-dominated
        probs = np.exp(_np_log_softmax(np.concatenate([predict_logits(p, x_lab),
                                                       predict_logits(p, x_strong)])))
        if probs.max() > 0.95:
            continue
        energy = free_energy_score(weak_logits)
        tau, gap = _split_threshold(energy)
        if gap < 10 * KINK_CLEARANCE:
            continue
        m_ood = float(energy.max()) + 1.0
        return Instance(p, x_lab, onehot(rng.integers(0, C, size=B), C), x_weak, x_strong,
                        tau_id=tau, tau_ood=tau, m_ood=m_ood)
    raise RuntimeError("could not draw an instance away from kinks")


# --- plain numpy reference used on the finite-difference side -----------------

def _np_log_softmax(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=1, keepdims=True)
    return v - m - np.log(np.exp(v - m).sum(axis=1, keepdims=True))


def _np_features(a, x):
    depth = sum(1 for k in a if k.startswith("f.") and k.endswith(".weight"))
    for i in range(depth):
        x = x @ a[f"f.{i}.weight"] + a[f"f.{i}.bias"]
        if i < depth - 1:
            x = np.maximum(x, 0.0)
    return x


def _np_term(a, inst: Instance, z0: np.ndarray, term: str) -> float:
    if term == "composite":
        w_p, w_s, w_e, w_w = COMPOSITE_WEIGHTS
        return (_np_term(a, inst, z0, "l_l") + w_p * _np_term(a, inst, z0, "l_p")
                + w_s * _np_term(a, inst, z0, "l_s") + w_e * _np_term(a, inst, z0, "l_e")
                + w_w * _np_term(a, inst, z0, "l_w"))
    if term == "l_w":
        return 0.5 * sum(float(np.sum(v * v)) for k, v in a.items() if k.endswith(".weight"))
    if term == "l_l":
        logits = _np_features(a, inst.x_lab) @ a["g.weight"] + a["g.bias"]
        return float(-np.mean(np.sum(inst.y_lab * _np_log_softmax(logits), axis=1)))
    if term == "l_s":
        hv = _np_features(a, inst.x_strong) @ a["h.weight"] + a["h.bias"]
        cos = np.sum(hv * z0, axis=1) / (np.linalg.norm(hv, axis=1) * np.linalg.norm(z0, axis=1))
        return float(-np.mean(cos))
    w = _np_features(a, inst.x_weak) @ a["g.weight"] + a["g.bias"]
    m = w.max(axis=1)
    energy = -(m + np.log(np.exp(w - m[:, None]).sum(axis=1)))
    if term == "l_p":
        q = _np_features(a, inst.x_strong) @ a["g.weight"] + a["g.bias"]
        picked = _np_log_softmax(q)[np.arange(len(q)), np.argmax(w, axis=1)]
        return float(-np.sum(picked * (energy < inst.tau_id)) / len(q))
    if term == "l_e":
        sel = energy > inst.tau_ood
        if not sel.any():
            return 0.0
        return float(np.mean(np.maximum(inst.m_ood - energy[sel], 0.0) ** 2))
    raise ValueError(f"unknown term {term!r}")


def _terms(p, inst: Instance) -> dict[str, Tensor]:
    """All five losses as graphs over the parameter tensors."""
    logits_lab = forward_logits(p, forward_features(p, Tensor(inst.x_lab)))
    z = forward_features(p, Tensor(inst.x_weak))
    w = forward_logits(p, z)
    v = forward_features(p, Tensor(inst.x_strong))
    q = forward_logits(p, v)
    l_p, _ = pseudo_label_loss(w.values, q, inst.tau_id)
    l_e, _ = energy_reg_loss(w, inst.tau_ood, inst.m_ood)
    return {"l_l": supervised_loss(logits_lab, inst.y_lab),
            "l_s": self_supervised_loss(project(p, v), z),
            "l_p": l_p, "l_e": l_e, "l_w": weight_decay_loss(p)}


def _scalar(terms: dict[str, Tensor], term: str) -> Tensor:
    if term == "composite":
        return total_loss(terms, *COMPOSITE_WEIGHTS).graph
    return terms[term]


def check_term(inst: Instance, term: str, eps: float = 1e-5) -> float:
    """Worst relative error for one term.

    The numeric side is an independent numpy evaluation; it holds the ℓs
    target at its unperturbed value, which is what the stop-gradient means.
    """
    if term not in TERMS:
        raise ValueError(f"unknown term {term!r}")
    z0 = _np_features(inst.params, inst.x_weak)

    def analytic(leaves):
        return _scalar(_terms(leaves, inst), term)

    def numeric(arrays):
        return _np_term(arrays, inst, z0, term)

    return grad_check(analytic, inst.params, eps=eps, numeric_fn=numeric)


def run_gradcheck(trials: int = 20, eps: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Worst relative error per term over ``trials`` random instances."""
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(TERMS, 0.0)
    for _ in range(trials):
        inst = make_instance(rng)
        for term in TERMS:
            worst[term] = max(worst[term], check_term(inst, term, eps))
    return worst
