"""Two-phase training loop, baselines, evaluation and run artifacts.

Steps are 0-based: step k uses lr_schedule(k) and, in sefoss mode, steps
k < K_p are pre-training. Thresholds are calibrated once, right before step
K_p, from EMA-model energies on the unaugmented labeled set.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig, format_config
from .data import OpenSetBatch, OpenSetDataset, generate_gaussian_openset, sample_batch
from .energy import (CalibrationError, Thresholds, auroc, calibrate_thresholds, free_energy_score,
                     softmax_confidence)
from .losses import (LossBreakdown, confident_mask, energy_reg_loss, pseudo_label_loss,
                     self_supervised_loss, supervised_loss, total_loss, weight_decay_loss)
from .network import (EmaShadow, ModelParams, OptimizerState, ema_update, forward_features,
                      forward_logits, init_params, predict_logits, project, read_checkpoint,
                      sgd_nesterov_step, write_checkpoint)
from .tensor import Tensor, backward, matmul, scale

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "lr", "l_l", "l_p", "l_s", "l_e", "l_w", "total", "inlier_mask_rate",
                  "outlier_mask_rate", "acc_id", "auroc_energy", "auroc_confidence", "tau_id",
                  "tau_ood", "m_ood"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    step: int
    params: ModelParams
    opt: OptimizerState
    ema: EmaShadow
    thresholds: Thresholds | None = None

    @classmethod
    def fresh(cls, cfg: RunConfig) -> "TrainState":
        params = init_params(cfg.seed, cfg.D, cfg.hidden_sizes, cfg.feature_dim, cfg.C)
        return cls(0, params, OptimizerState.zeros_like(params, cfg.momentum),
                   EmaShadow.of(params, cfg.ema_momentum))


def lr_schedule(k: int, cfg: RunConfig) -> float:
    """Constant during pre-training, then cosine decay."""
    if k < cfg.K_p or cfg.K == cfg.K_p:
        return cfg.eta0
    return cfg.eta0 * math.cos(cfg.gamma * math.pi * (k - cfg.K_p) / (2.0 * (cfg.K - cfg.K_p)))


def phase_weights(k: int, cfg: RunConfig) -> tuple[float, float, float, float]:
    """(w_p, w_s, w_e, w_w) applied at step k."""
    if cfg.mode == "supervised":
        return 0.0, 0.0, 0.0, cfg.w_w
    if cfg.mode == "fixmatch_baseline":
        return (cfg.w_p if cfg.use_lp else 0.0), 0.0, 0.0, cfg.w_w
    if k < cfg.K_p:
        return 0.0, cfg.w_s, 0.0, cfg.w_w
    return (cfg.w_p if cfg.use_lp else 0.0), cfg.w_s, (cfg.w_e if cfg.use_le else 0.0), cfg.w_w


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Independent stream per (seed, step), so runs can resume anywhere."""
    return np.random.default_rng([seed, 1, step])


def _guarded_self_supervision(hv: Tensor, z: Tensor) -> Tensor:
    # rows with a zero norm on either side carry no direction; drop them but
    # keep normalizing by the full batch size
    ok = (np.linalg.norm(hv.values, axis=1) > 0) & (np.linalg.norm(z.values, axis=1) > 0)
    if ok.all():
        return self_supervised_loss(hv, z)
    n = hv.shape[0]
    if not ok.any():
        return Tensor(0.0)
    pick = Tensor(np.eye(n)[ok])
    kept = self_supervised_loss(matmul(pick, hv), matmul(pick, z.detach()))
    return scale(kept, ok.sum() / n)


def compute_losses(params: dict[str, Tensor], batch: OpenSetBatch, cfg: RunConfig,
                   weights: tuple[float, float, float, float],
                   thresholds: Thresholds | None) -> LossBreakdown:
    """Forward pass of one training step; returns the breakdown with its graph."""
    w_p, w_s, w_e, w_w = weights
    zero = Tensor(0.0)
    logits_lab = forward_logits(params, forward_features(params, Tensor(batch.labeled_weak)))
    terms = {"l_l": supervised_loss(logits_lab, batch.labeled_onehot),
             "l_p": zero, "l_s": zero, "l_e": zero, "l_w": weight_decay_loss(params)}
    n_in = n_out = 0
    if cfg.mode != "supervised" and len(batch.unlabeled_weak):
        z = forward_features(params, Tensor(batch.unlabeled_weak))
        w = forward_logits(params, z)
        v = forward_features(params, Tensor(batch.unlabeled_strong))
        q = forward_logits(params, v)
        terms["l_s"] = _guarded_self_supervision(project(params, v), z)
        if cfg.mode == "fixmatch_baseline":
            mask = confident_mask(w.values, cfg.fixmatch_conf_threshold)
            terms["l_p"], n_in = pseudo_label_loss(w.values, q, mask=mask)
        elif thresholds is not None:
            terms["l_p"], n_in = pseudo_label_loss(w.values, q, thresholds.tau_id, cfg.beta)
            terms["l_e"], n_out = energy_reg_loss(w, thresholds.tau_ood, thresholds.m_ood, cfg.beta)
        elif w_p or w_e:
            raise TrainingError("pseudo-labeling or energy loss enabled before calibration")
    return total_loss(terms, w_p, w_s, w_e, w_w, n_in, n_out)


def training_step(state: TrainState, batch: OpenSetBatch, cfg: RunConfig,
                  weights: tuple[float, float, float, float] | None = None
                  ) -> tuple[TrainState, LossBreakdown]:
    """One SGD step on the combined loss, followed by one EMA update."""
    if weights is None:
        weights = phase_weights(state.step, cfg)
    if cfg.mode == "sefoss" and state.step >= cfg.K_p and state.thresholds is None and (
            weights[0] or weights[2]):
        raise TrainingError(f"step {state.step} is past pre-training but thresholds are missing")
    leaves = state.params.as_leaves()
    breakdown = compute_losses(leaves, batch, cfg, weights, state.thresholds)
    backward(breakdown.graph)
    breakdown.graph = None
    grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}
    params, opt = sgd_nesterov_step(state.params, grads, state.opt, lr_schedule(state.step, cfg))
    ema = ema_update(state.ema, params)
    return TrainState(state.step + 1, params, opt, ema, state.thresholds), breakdown


def calibrate(state: TrainState, labeled_x: np.ndarray, cfg: RunConfig) -> TrainState:
    """Set thresholds from EMA energies of the unaugmented labeled set (once per run)."""
    if state.thresholds is not None:
        raise CalibrationError("thresholds were already calibrated for this run")
    if state.step != cfg.K_p:
        raise CalibrationError(f"calibration happens at step K_p={cfg.K_p}, not {state.step}")
    scores = free_energy_score(predict_logits(state.ema.params, labeled_x), cfg.beta)
    th = calibrate_thresholds(scores, cfg.energy)
    if cfg.tau_id_override is not None:
        th = Thresholds(cfg.tau_id_override, th.tau_ood, th.m_ood)
    log.info("calibrated thresholds tau_id=%.4f tau_ood=%.4f m_ood=%.4f", *th.as_tuple())
    return TrainState(state.step, state.params, state.opt, state.ema, th)


def _step_loop(state: TrainState, dataset: OpenSetDataset, cfg: RunConfig, stop: int,
               on_step: Callable[[TrainState, LossBreakdown], None] | None = None) -> TrainState:
    mu = 0 if cfg.mode == "supervised" else cfg.mu
    while state.step < stop:
        batch = sample_batch(dataset, cfg.B, mu, batch_rng(cfg.seed, state.step), cfg.augment)
        state, bd = training_step(state, batch, cfg)
        if on_step is not None:
            on_step(state, bd)
    return state


def pretrain_phase(state: TrainState, dataset: OpenSetDataset, cfg: RunConfig,
                   on_step=None) -> TrainState:
    if state.step != 0:
        raise TrainingError("pre-training starts at step 0")
    return _step_loop(state, dataset, cfg, cfg.K_p, on_step)


def train_phase(state: TrainState, dataset: OpenSetDataset, cfg: RunConfig, on_step=None) -> TrainState:
    if cfg.mode == "sefoss" and state.thresholds is None:
        raise TrainingError("train_phase needs calibrated thresholds")
    return _step_loop(state, dataset, cfg, cfg.K, on_step)


@dataclass
class Evaluation:
    acc_id: float
    auroc_energy: float
    auroc_confidence: float
    id_energy: np.ndarray = field(repr=False)
    ood_energy: np.ndarray = field(repr=False)
    id_confidence: np.ndarray = field(repr=False)
    ood_confidence: np.ndarray = field(repr=False)


def evaluate(params: ModelParams, id_x: np.ndarray, id_y: np.ndarray, ood_x: np.ndarray,
             beta: float = 1.0) -> Evaluation:
    """Closed-set accuracy and AUROC under both scores. Pure."""
    id_logits = predict_logits(params, id_x)
    ood_logits = predict_logits(params, ood_x)
    acc = float(np.mean(np.argmax(id_logits, axis=1) == id_y))
    id_e, ood_e = free_energy_score(id_logits, beta), free_energy_score(ood_logits, beta)
    id_c, ood_c = softmax_confidence(id_logits), softmax_confidence(ood_logits)
    return Evaluation(acc, auroc(id_e, ood_e), auroc(-id_c, -ood_c), id_e, ood_e, id_c, ood_c)


# --- checkpoints -------------------------------------------------------------

def save_state(path, state: TrainState) -> None:
    entries: dict[str, np.ndarray] = dict(state.params.items())
    entries.update({f"ema/{k}": v for k, v in state.ema.params.items()})
    entries.update({f"velocity/{k}": v for k, v in state.opt.velocity.items()})
    entries["state/step"] = np.array([[state.step]], dtype=np.float64)
    entries["state/optimizer_step"] = np.array([[state.opt.step]], dtype=np.float64)
    entries["state/momentum"] = np.array([[state.opt.momentum, state.ema.momentum]])
    if state.thresholds is not None:
        entries["state/thresholds"] = np.array([state.thresholds.as_tuple()])
    write_checkpoint(path, entries)


def load_state(path) -> TrainState:
    entries = read_checkpoint(path)
    live = {k: v for k, v in entries.items() if "/" not in k}
    ema = {k[4:]: v for k, v in entries.items() if k.startswith("ema/")}
    vel = {k[9:]: v for k, v in entries.items() if k.startswith("velocity/")}
    momentum, ema_momentum = entries["state/momentum"][0]
    th = entries.get("state/thresholds")
    return TrainState(
        step=int(entries["state/step"][0, 0]),
        params=ModelParams(live),
        opt=OptimizerState(vel, float(momentum), int(entries["state/optimizer_step"][0, 0])),
        ema=EmaShadow(ModelParams(ema), float(ema_momentum)),
        thresholds=None if th is None else Thresholds(*map(float, th[0])),
    )


# --- experiment runner -------------------------------------------------------

def dataset_for(cfg: RunConfig, unseen_ood_kind: str | None = None) -> OpenSetDataset:
    return generate_gaussian_openset(
        cfg.resolved_data_seed, D=cfg.D, C=cfg.C, n_labeled=cfg.n_labeled,
        n_unlabeled=cfg.n_unlabeled, ood_fraction=cfg.ood_fraction, ood_kind=cfg.ood_kind,
        cluster_spread=cfg.cluster_spread, n_ood_clusters=cfg.n_ood_clusters,
        cluster_std=cfg.cluster_std, n_test_per_class=cfg.n_test_per_class,
        n_test_ood=cfg.n_test_ood, unseen_ood_kind=unseen_ood_kind, mix=cfg.mix,
        ood_radius=cfg.ood_radius, layout=cfg.layout)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _median_of_last(history: list[dict], key: str, n: int = 5) -> float:
    vals = [row[key] for row in history[-n:]]
    return float(np.median(vals)) if vals else float("nan")


@dataclass
class RunResult:
    state: TrainState
    history: list[dict]
    summary: dict


def _write_metrics(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _read_metrics(path: Path, upto: int) -> list[dict]:
    rows = []
    with path.open(newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {k: (float(v) if v != "" else None) for k, v in raw.items()}
            row["step"] = int(row["step"])
            if row["step"] <= upto:
                rows.append(row)
    return rows


def run_experiment(cfg: RunConfig, out_dir=None, dataset: OpenSetDataset | None = None,
                   resume_from=None) -> RunResult:
    """Pre-train, calibrate, train; evaluate the EMA model every ``eval_every`` steps.

    Writes ``metrics.csv``, ``summary.json``, ``config.txt`` and checkpoints to
    ``out_dir`` when given. The summary reports medians over the last five
    evaluations.
    """
    t0 = time.perf_counter()
    dataset = dataset if dataset is not None else dataset_for(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(cfg))

    history: list[dict] = []
    if resume_from is not None:
        state = load_state(resume_from)
        if out is not None and (out / "metrics.csv").exists():
            history = _read_metrics(out / "metrics.csv", state.step)
    else:
        state = TrainState.fresh(cfg)

    n_unlabeled_batch = max(cfg.mu * cfg.B, 1)

    def record(st: TrainState, bd: LossBreakdown) -> None:
        k = st.step
        if out is not None and cfg.checkpoint_every and k % cfg.checkpoint_every == 0 and k < cfg.K:
            save_state(out / f"checkpoint_{k:07d}.sfos", st)
        if k % cfg.eval_every and k != cfg.K:
            return
        ev = evaluate(st.ema.params, dataset.test_id_x, dataset.test_id_y, dataset.test_ood_x, cfg.beta)
        th = st.thresholds
        row = {"step": k, "lr": lr_schedule(k - 1, cfg), "l_l": bd.l_l, "l_p": bd.l_p, "l_s": bd.l_s,
               "l_e": bd.l_e, "l_w": bd.l_w, "total": bd.total,
               "inlier_mask_rate": bd.inlier_mask_count / n_unlabeled_batch,
               "outlier_mask_rate": bd.outlier_mask_count / n_unlabeled_batch,
               "acc_id": ev.acc_id, "auroc_energy": ev.auroc_energy,
               "auroc_confidence": ev.auroc_confidence,
               "tau_id": th.tau_id if th else None, "tau_ood": th.tau_ood if th else None,
               "m_ood": th.m_ood if th else None}
        history.append(row)
        if out is not None:
            _write_metrics(out / "metrics.csv", history)
        log.info("step %d acc=%.4f auroc_e=%.4f auroc_c=%.4f total=%.4f", k, ev.acc_id,
                 ev.auroc_energy, ev.auroc_confidence, bd.total)

    if cfg.mode == "sefoss":
        if state.step < cfg.K_p:
            state = _step_loop(state, dataset, cfg, cfg.K_p, record)
        if state.thresholds is None and cfg.K > cfg.K_p:
            state = calibrate(state, dataset.labeled_x, cfg)
    state = _step_loop(state, dataset, cfg, cfg.K, record)

    summary = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "steps": state.step,
        "final": {key: _median_of_last(history, key) for key in ("acc_id", "auroc_energy", "auroc_confidence")},
        "last": {key: history[-1][key] for key in ("acc_id", "auroc_energy", "auroc_confidence")} if history else {},
        "thresholds": list(state.thresholds.as_tuple()) if state.thresholds else None,
        "wall_time_s": time.perf_counter() - t0,
        "config": cfg.to_dict(),
    }
    if out is not None:
        _write_metrics(out / "metrics.csv", history)
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        save_state(out / "final.sfos", state)
    return RunResult(state, history, summary)


# --- OOD-fraction sweep ------------------------------------------------------

SWEEP_COLUMNS = ["fraction", "mode", "acc", "auroc"]


def _sweep_child(args) -> dict:
    cfg, out_dir = args
    result = run_experiment(cfg, out_dir)
    final = result.summary["final"]
    return {"fraction": cfg.ood_fraction, "mode": cfg.mode, "acc": final["acc_id"],
            "auroc": final["auroc_energy"]}


def sweep_ood_fraction(cfg: RunConfig, fractions, modes, out_dir=None, threads: int = 1) -> list[dict]:
    """One run per (fraction, mode) with shared seeds, mixed by adding OOD up to
    0.5 and removing ID above it. Returns rows of ``SWEEP_COLUMNS``; ``auroc``
    is the free-energy AUROC for every mode.
    """
    jobs = []
    for frac in fractions:
        for mode in modes:
            child = cfg.replace(ood_fraction=float(frac), mode=mode, mix="add_remove")
            child.validate()
            sub = None if out_dir is None else Path(out_dir) / f"{mode}_frac{float(frac):.3f}"
            jobs.append((child, sub))
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_child, jobs))
    else:
        rows = [_sweep_child(job) for job in jobs]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with (Path(out_dir) / "sweep.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_COLUMNS)
            for row in rows:
                w.writerow([repr(row["fraction"]), row["mode"], repr(row["acc"]), repr(row["auroc"])])
    return rows
