"""Figures rendered from run artifacts (metrics.csv, sweep.csv).

Everything reads the delimited files back, so a figure can be regenerated
from a finished run directory without rerunning anything.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("l_l", "l_p", "l_s", "l_e", "l_w")


def read_csv_columns(path) -> dict[str, list]:
    """Column name -> list of floats (None for blanks; text kept as-is)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols: dict[str, list] = {k: [] for k in (rows[0].keys() if rows else [])}
    for row in rows:
        for k, v in row.items():
            if v == "":
                cols[k].append(None)
                continue
            try:
                cols[k].append(float(v))
            except ValueError:
                cols[k].append(v)
    return cols


def _pairs(xs, ys):
    kept = [(x, y) for x, y in zip(xs, ys) if y is not None]
    return [p[0] for p in kept], [p[1] for p in kept]


def plot_metrics(metrics_csv, out_dir=None) -> list[Path]:
    """Three figures: scores over training, loss terms, mask rates."""
    metrics_csv = Path(metrics_csv)
    out = Path(out_dir) if out_dir is not None else metrics_csv.parent
    out.mkdir(parents=True, exist_ok=True)
    m = read_csv_columns(metrics_csv)
    step = m.get("step", [])
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("acc_id", "closed-set accuracy"), ("auroc_energy", "AUROC, free energy"),
                       ("auroc_confidence", "AUROC, softmax confidence")):
        ax.plot(*_pairs(step, m[key]), marker="o", ms=3, label=label)
    if any(v is not None for v in m.get("tau_id", [])):
        first = next(s for s, v in zip(step, m["tau_id"]) if v is not None)
        ax.axvline(first, color="0.6", ls=":", lw=1, label="thresholds calibrated")
    ax.set_xlabel("step")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    written.append(out / "scores.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in LOSS_KEYS:
        ax.plot(*_pairs(step, m[key]), label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss at the last step before evaluation")
    ax.legend(fontsize=8)
    fig.tight_layout()
    written.append(out / "losses.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(*_pairs(step, m["inlier_mask_rate"]), label="pseudo-inliers")
    ax.plot(*_pairs(step, m["outlier_mask_rate"]), label="pseudo-outliers")
    ax.set_xlabel("step")
    ax.set_ylabel("fraction of unlabeled batch")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    written.append(out / "mask_rates.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)
    return written


def plot_sweep(sweep_csv, out_dir=None) -> list[Path]:
    """AUROC and accuracy against the OOD fraction, one line per mode."""
    sweep_csv = Path(sweep_csv)
    out = Path(out_dir) if out_dir is not None else sweep_csv.parent
    out.mkdir(parents=True, exist_ok=True)
    s = read_csv_columns(sweep_csv)
    modes = sorted(set(s.get("mode", [])), key=str)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for mode in modes:
        idx = sorted((i for i, md in enumerate(s["mode"]) if md == mode), key=lambda i: s["fraction"][i])
        fr = [s["fraction"][i] for i in idx]
        axes[0].plot(*_pairs(fr, [s["auroc"][i] for i in idx]), marker="o", label=mode)
        axes[1].plot(*_pairs(fr, [s["acc"][i] for i in idx]), marker="o", label=mode)
    axes[0].set_ylabel("AUROC")
    axes[1].set_ylabel("closed-set accuracy")
    for ax in axes:
        ax.set_xlabel("OOD fraction of unlabeled data")
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / "sweep.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
