"""Synthetic open-set benchmarks, vector augmentations and batch sampling.

Cluster means occupy slots either along orthogonal directions of a random
subspace (``sphere``) or evenly around a circle in a random plane (``ring``).
ID classes and extra OOD clusters take interleaved slots; uniform-noise OOD
fills the bounding box of the ID clusters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OOD_KINDS = ("extra_clusters", "uniform_noise")
LAYOUTS = ("sphere", "ring")
MIX_SCHEMES = ("fixed_total", "add_remove")


class DataConfigError(ValueError):
    pass


@dataclass
class HiddenLabels:
    """Ground truth for the unlabeled pool. Evaluation bookkeeping only."""
    is_ood: np.ndarray
    classes: np.ndarray  # -1 for OOD


@dataclass
class OpenSetDataset:
    num_classes: int
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    test_id_x: np.ndarray
    test_id_y: np.ndarray
    test_ood_x: np.ndarray
    hidden: HiddenLabels = field(repr=False)
    unseen_ood_x: np.ndarray | None = None
    id_means: np.ndarray | None = field(default=None, repr=False)

    @property
    def input_dim(self) -> int:
        return self.labeled_x.shape[1]

    def realized_ood_fraction(self) -> float:
        n = len(self.hidden.is_ood)
        return float(self.hidden.is_ood.mean()) if n else 0.0


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.15
    strong_mask_prob: float = 0.2
    strong_scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.strong_scale_range
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise DataConfigError("noise sigmas must be non-negative")
        if not 0.0 <= self.strong_mask_prob <= 1.0:
            raise DataConfigError("strong_mask_prob must lie in [0, 1]")
        if not 0 < lo <= hi:
            raise DataConfigError("strong_scale_range needs 0 < lo <= hi")


@dataclass
class OpenSetBatch:
    """One step's inputs. Deliberately carries no OOD ground truth."""
    labeled_weak: np.ndarray
    labeled_onehot: np.ndarray
    unlabeled_weak: np.ndarray
    unlabeled_strong: np.ndarray


def slot_means(rng, D: int, total: int, spacing: float, layout: str = "sphere") -> tuple[np.ndarray, float]:
    """Cluster means for ``total`` slots and their common norm.

    ``sphere``: orthogonal directions of a random subspace, so every pair of
    means is ``spacing`` apart. ``ring``: evenly spaced on a circle in a
    random plane, neighbours ``spacing`` apart.
    """
    if layout == "sphere":
        basis, _ = np.linalg.qr(rng.normal(size=(D, total)))
        radius = spacing / np.sqrt(2.0)
        return radius * basis.T, radius
    basis, _ = np.linalg.qr(rng.normal(size=(D, 2)))
    radius = spacing / (2.0 * np.sin(np.pi / total))
    angles = 2.0 * np.pi * np.arange(total) / total
    return radius * (np.cos(angles)[:, None] * basis[:, 0] + np.sin(angles)[:, None] * basis[:, 1]), radius


def ring_layout(num_classes: int, n_ood_clusters: int) -> tuple[np.ndarray, np.ndarray]:
    """Slot indices on the ring for ID classes and for OOD clusters."""
    total = num_classes + n_ood_clusters
    ood_slots = np.array([int((j + 0.5) * total / n_ood_clusters) for j in range(n_ood_clusters)],
                         dtype=int)
    id_slots = np.array([s for s in range(total) if s not in set(ood_slots.tolist())], dtype=int)
    return id_slots, ood_slots


def unlabeled_counts(n_unlabeled: int, ood_fraction: float, scheme: str = "fixed_total") -> tuple[int, int]:
    """(n_id, n_ood) for the unlabeled pool.

    ``fixed_total`` keeps the pool size. ``add_remove`` starts from an even
    split and adds OOD samples up to a fraction of 0.5, then removes ID
    samples above it.
    """
    if not 0.0 <= ood_fraction <= 1.0:
        raise DataConfigError(f"ood_fraction must lie in [0, 1], got {ood_fraction}")
    if scheme == "fixed_total":
        n_ood = int(round(ood_fraction * n_unlabeled))
        return n_unlabeled - n_ood, n_ood
    if scheme == "add_remove":
        base = n_unlabeled // 2
        if ood_fraction <= 0.5:
            return base, int(round(ood_fraction / (1.0 - ood_fraction) * base))
        return int(round((1.0 - ood_fraction) / ood_fraction * base)), base
    raise DataConfigError(f"unknown mix scheme {scheme!r}")


def generate_gaussian_openset(seed: int, D: int = 8, C: int = 4, n_labeled: int = 40,
                              n_unlabeled: int = 4000, ood_fraction: float = 0.5,
                              ood_kind: str = "extra_clusters", cluster_spread: float = 5.0,
                              n_ood_clusters: int = 2, cluster_std: float = 1.0,
                              n_test_per_class: int = 250, n_test_ood: int = 1000,
                              unseen_ood_kind: str | None = None, mix: str = "fixed_total",
                              ood_radius: float = 1.0, layout: str = "sphere") -> OpenSetDataset:
    """Deterministic open-set dataset.

    ``cluster_spread`` is the distance between neighbouring cluster means in
    units of ``cluster_std``; OOD cluster means are scaled by ``ood_radius``.
    """
    if D < 2:
        raise DataConfigError("D must be at least 2")
    if C < 1 or n_labeled % C != 0:
        raise DataConfigError(f"n_labeled={n_labeled} is not divisible by C={C}")
    if ood_kind not in OOD_KINDS:
        raise DataConfigError(f"unknown ood_kind {ood_kind!r}")
    if layout not in LAYOUTS:
        raise DataConfigError(f"unknown layout {layout!r}")
    if unseen_ood_kind is not None and unseen_ood_kind not in OOD_KINDS:
        raise DataConfigError(f"unknown unseen_ood_kind {unseen_ood_kind!r}")
    n_id_u, n_ood_u = unlabeled_counts(n_unlabeled, ood_fraction, mix)

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(9)]
    (layout_rng, lab_rng, unl_id_rng, unl_ood_rng, shuffle_rng,
     test_id_rng, test_ood_rng, unseen_rng, _) = streams

    k = max(n_ood_clusters, 1)
    total = C + k
    if layout == "sphere" and D < total:
        raise DataConfigError(f"sphere layout needs D >= C + n_ood_clusters = {total}, got D={D}")
    slots, radius = slot_means(layout_rng, D, total, cluster_spread * cluster_std, layout)
    id_slots, ood_slots = ring_layout(C, k)
    id_means, ood_means = slots[id_slots], ood_radius * slots[ood_slots]
    lo = id_means.min(axis=0) - 3.0 * cluster_std
    hi = id_means.max(axis=0) + 3.0 * cluster_std

    def draw_id(rng, n, balanced=True):
        y = np.arange(n) % C if balanced else rng.integers(0, C, size=n)
        y = rng.permutation(y)
        return id_means[y] + cluster_std * rng.normal(size=(n, D)), y

    def draw_ood(rng, n, kind, means=ood_means):
        if kind == "uniform_noise":
            return rng.uniform(lo, hi, size=(n, D))
        which = np.arange(n) % len(means)
        return means[rng.permutation(which)] + cluster_std * rng.normal(size=(n, D))

    labeled_x, labeled_y = draw_id(lab_rng, n_labeled)
    uid_x, uid_y = draw_id(unl_id_rng, n_id_u)
    uood_x = draw_ood(unl_ood_rng, n_ood_u, ood_kind)
    unlabeled_x = np.concatenate([uid_x, uood_x]) if n_id_u + n_ood_u else np.zeros((0, D))
    is_ood = np.concatenate([np.zeros(n_id_u, bool), np.ones(n_ood_u, bool)])
    classes = np.concatenate([uid_y, -np.ones(n_ood_u, int)]).astype(int)
    perm = shuffle_rng.permutation(len(unlabeled_x))
    unlabeled_x, is_ood, classes = unlabeled_x[perm], is_ood[perm], classes[perm]

    test_id_x, test_id_y = draw_id(test_id_rng, n_test_per_class * C)
    test_ood_x = draw_ood(test_ood_rng, n_test_ood, ood_kind)

    unseen = None
    if unseen_ood_kind is not None:
        unseen = make_unseen_ood(unseen_rng, unseen_ood_kind, n_test_ood, slots, cluster_std, lo, hi)

    return OpenSetDataset(
        num_classes=C, labeled_x=labeled_x, labeled_y=labeled_y.astype(int),
        unlabeled_x=unlabeled_x, test_id_x=test_id_x, test_id_y=test_id_y.astype(int),
        test_ood_x=test_ood_x, hidden=HiddenLabels(is_ood, classes),
        unseen_ood_x=unseen, id_means=id_means)


def make_unseen_ood(rng, kind, n, slots, cluster_std, lo, hi) -> np.ndarray:
    """OOD samples from a distribution absent from training.

    Clusters sit at the mirror images of the slot means, 1.5x further out.
    """
    D = slots.shape[1]
    if kind == "uniform_noise":
        return rng.uniform(lo, hi, size=(n, D))
    means = -1.5 * slots
    which = rng.permutation(np.arange(n) % len(means))
    return means[which] + cluster_std * rng.normal(size=(n, D))


def weak_augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.weak_noise_sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, cfg.weak_noise_sigma, size=x.shape)


def strong_augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Noise, then random coordinate dropout, then a random per-sample rescale."""
    x = np.asarray(x, dtype=np.float64)
    out = x + rng.normal(0.0, cfg.strong_noise_sigma, size=x.shape) if cfg.strong_noise_sigma else x.copy()
    if cfg.strong_mask_prob > 0:
        out = np.where(rng.random(size=x.shape) < cfg.strong_mask_prob, 0.0, out)
    lo, hi = cfg.strong_scale_range
    if lo != hi:
        factor = rng.uniform(lo, hi, size=x.shape[:-1] + (1,))
        out = out * factor
    elif lo != 1.0:
        out = out * lo
    return out


def sample_batch(dataset: OpenSetDataset, B: int, mu: int, rng: np.random.Generator,
                 aug: AugmentConfig = AugmentConfig()) -> OpenSetBatch:
    """B labeled and mu*B unlabeled examples drawn with replacement."""
    if len(dataset.labeled_x) == 0:
        raise DataConfigError("labeled pool is empty")
    C = dataset.num_classes
    idx = rng.integers(0, len(dataset.labeled_x), size=B)
    lab = weak_augment(dataset.labeled_x[idx], aug, rng)
    y = np.zeros((B, C))
    y[np.arange(B), dataset.labeled_y[idx]] = 1.0
    n_u = mu * B
    if n_u == 0:
        empty = np.zeros((0, dataset.input_dim))
        return OpenSetBatch(lab, y, empty, empty.copy())
    if len(dataset.unlabeled_x) == 0:
        raise DataConfigError("unlabeled pool is empty")
    u = dataset.unlabeled_x[rng.integers(0, len(dataset.unlabeled_x), size=n_u)]
    return OpenSetBatch(lab, y, weak_augment(u, aug, rng), strong_augment(u, aug, rng))


# --- CSV export ------------------------------------------------------------

def save_dataset_csv(dataset: OpenSetDataset, path) -> Path:
    """Write ``split,x_0..x_{D-1},label,is_ood``; unlabeled ground truth goes to
    a sibling ``*.hidden.csv``. Returns the hidden file's path."""
    path = Path(path)
    D = dataset.input_dim
    header = ["split", *[f"x_{i}" for i in range(D)], "label", "is_ood"]

    def rows(split, xs, labels, is_ood):
        for j, x in enumerate(xs):
            yield [split, *[repr(float(v)) for v in x],
                   int(labels[j]) if labels is not None else -1,
                   "" if is_ood is None else int(is_ood)]

    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows("labeled", dataset.labeled_x, dataset.labeled_y, None))
        w.writerows(rows("unlabeled", dataset.unlabeled_x, None, None))
        w.writerows(rows("test_id", dataset.test_id_x, dataset.test_id_y, 0))
        w.writerows(rows("test_ood", dataset.test_ood_x, None, 1))
        if dataset.unseen_ood_x is not None:
            w.writerows(rows("unseen_ood", dataset.unseen_ood_x, None, 1))

    hidden_path = path.with_name(path.stem + ".hidden.csv")
    with hidden_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "is_ood", "class"])
        for j, (o, c) in enumerate(zip(dataset.hidden.is_ood, dataset.hidden.classes)):
            w.writerow([j, int(o), int(c)])
    return hidden_path


def load_dataset_csv(path, num_classes: int | None = None) -> OpenSetDataset:
    path = Path(path)
    split_x: dict[str, list] = {}
    split_y: dict[str, list] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        D = sum(1 for h in header if h.startswith("x_"))
        for row in reader:
            split_x.setdefault(row[0], []).append([float(v) for v in row[1:1 + D]])
            split_y.setdefault(row[0], []).append(int(row[1 + D]))

    def arr(split):
        return np.array(split_x.get(split, []), dtype=np.float64).reshape(-1, D)

    labeled_y = np.array(split_y.get("labeled", []), dtype=int)
    test_y = np.array(split_y.get("test_id", []), dtype=int)
    C = num_classes or int(max(labeled_y.max(initial=-1), test_y.max(initial=-1)) + 1)
    n_u = len(split_x.get("unlabeled", []))
    hidden = HiddenLabels(np.zeros(n_u, bool), np.full(n_u, -1))
    hidden_path = path.with_name(path.stem + ".hidden.csv")
    if hidden_path.exists():
        with hidden_path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        hidden = HiddenLabels(np.array([r["is_ood"] == "1" for r in rows], bool),
                              np.array([int(r["class"]) for r in rows], int))
    unseen = arr("unseen_ood") if "unseen_ood" in split_x else None
    return OpenSetDataset(C, arr("labeled"), labeled_y, arr("unlabeled"), arr("test_id"), test_y,
                          arr("test_ood"), hidden, unseen)
