"""Independent reference implementations used only by the tests."""

import numpy as np


def brute_auroc(id_scores, ood_scores):
    """Count every (OOD, ID) pair; ties count one half."""
    wins = 0.0
    for o in ood_scores:
        for i in id_scores:
            if o > i:
                wins += 1.0
            elif o == i:
                wins += 0.5
    return wins / (len(id_scores) * len(ood_scores))


def central_diff(f, x, eps=1e-6):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = f(x)
        x[idx] = orig - eps
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def max_rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / denom))


def np_log_softmax(v):
    m = v.max(axis=1, keepdims=True)
    return v - m - np.log(np.exp(v - m).sum(axis=1, keepdims=True))


def direct_energy(row):
    """-log sum exp by plain summation in math.fsum precision."""
    import math
    return -math.log(math.fsum(math.exp(v) for v in row))


def stop_gradient_gaps(seed):
    """Largest gradient discrepancies for the stop-gradient contracts.

    ``ls_copy`` / ``lp_copy``: live-target gradient minus the gradient with the
    weak-branch target replaced by a literal constant copy. ``le_strong``,
    ``lp_weak`` and ``ls_weak``: gradient reaching inputs that must not receive
    any from that loss.
    """
    from sefoss.losses import energy_reg_loss, pseudo_label_loss, self_supervised_loss
    from sefoss.network import ModelParams, forward_features, forward_logits, init_params, project
    from sefoss.tensor import Tensor, backward

    rng = np.random.default_rng(seed)
    base = init_params(seed, 4, [6], 5, 3)
    # nonzero biases keep every feature row away from the zero vector
    params = ModelParams({k: (rng.normal(scale=0.5, size=v.shape) if k.endswith(".bias") else v)
                          for k, v in base.items()})
    xw = rng.normal(size=(8, 4))
    xs = xw + 0.3 * rng.normal(size=(8, 4))

    def grads(loss_of, constant_weak):
        leaves = params.as_leaves()
        weak_in = Tensor(xw, requires_grad=True)
        strong_in = Tensor(xs, requires_grad=True)
        z = forward_features(leaves, weak_in)
        w = forward_logits(leaves, z)
        if constant_weak:
            z, w = Tensor(z.values.copy()), Tensor(w.values.copy())
        v = forward_features(leaves, strong_in)
        q = forward_logits(leaves, v)
        backward(loss_of(leaves, z, w, v, q))
        out = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}
        for name, t in (("weak_in", weak_in), ("strong_in", strong_in)):
            out[name] = t.grad if t.grad is not None else np.zeros(t.shape)
        return out

    def energy_tau(w):
        from sefoss.energy import free_energy_score
        e = np.sort(free_energy_score(w.values))
        return 0.5 * (e[3] + e[4]), e[-1] + 1.0

    def ls(p, z, w, v, q):
        return self_supervised_loss(project(p, v), z)

    def lp(p, z, w, v, q):
        tau, _ = energy_tau(w)
        return pseudo_label_loss(w.values, q, tau)[0]

    def le(p, z, w, v, q):
        tau, m = energy_tau(w)
        return energy_reg_loss(w, tau, m)[0]

    def gap(a, b, keys=None):
        keys = keys or [k for k in a if k not in ("weak_in", "strong_in")]
        return max(float(np.max(np.abs(a[k] - b[k]))) for k in keys)

    live_ls, copy_ls = grads(ls, False), grads(ls, True)
    live_lp, copy_lp = grads(lp, False), grads(lp, True)
    live_le = grads(le, False)
    return {
        "ls_copy": gap(live_ls, copy_ls),
        "lp_copy": gap(live_lp, copy_lp),
        "le_strong": float(np.max(np.abs(live_le["strong_in"]))),
        "lp_weak": float(np.max(np.abs(live_lp["weak_in"]))),
        "ls_weak": float(np.max(np.abs(live_ls["weak_in"]))),
        "le_weak": float(np.max(np.abs(live_le["weak_in"]))),
    }


def pair_count_auroc(id_scores, ood_scores):
    """Brute-force pair counting, vectorized over the full n x m grid."""
    i = np.asarray(id_scores, float)[None, :]
    o = np.asarray(ood_scores, float)[:, None]
    wins = np.count_nonzero(o > i) + 0.5 * np.count_nonzero(o == i)
    return wins / (i.size * o.size)
