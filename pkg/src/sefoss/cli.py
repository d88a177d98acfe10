"""Command-line entry point: ``sefoss <command> ...``.

Exit codes: 0 success, 1 check failure, 2 config error, 3 artifact error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_markdown, load_config
from .data import DataConfigError, OOD_KINDS, load_dataset_csv, make_unseen_ood, save_dataset_csv
from .energy import auroc, free_energy_score, softmax_confidence
from .network import CheckpointError, ModelParams, predict_logits, read_checkpoint
from .network import ConfigError as ModelConfigError
from .tensor import corrupted_adjoint

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ARTIFACT = 0, 1, 2, 3
GRADCHECK_LIMIT = 1e-4


class ArtifactError(Exception):
    pass


def _split_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _config_from(args) -> RunConfig:
    return load_config(getattr(args, "config", None), args.set or (),
                       seed=getattr(args, "seed", None), mode=getattr(args, "mode", None))


def cmd_train(args) -> int:
    from .trainer import run_experiment

    cfg = _config_from(args)
    result = run_experiment(cfg, args.out, resume_from=args.resume)
    final = result.summary["final"]
    print(f"mode={cfg.mode} seed={cfg.seed} steps={result.state.step} "
          f"acc={final['acc_id']:.4f} auroc_energy={final['auroc_energy']:.4f} "
          f"auroc_confidence={final['auroc_confidence']:.4f}")
    if args.plots:
        from .plotting import plot_metrics
        plot_metrics(Path(args.out) / "metrics.csv")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .trainer import sweep_ood_fraction

    cfg = _config_from(args)
    try:
        fractions = [float(f) for f in _split_list(args.fractions)]
    except ValueError:
        raise ConfigError(f"cannot parse fractions {args.fractions!r}", "fractions") from None
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ConfigError("fractions must lie in [0, 1]", "fractions")
    modes = _split_list(args.modes)
    for mode in modes:
        cfg.replace(mode=mode)  # validates
    threads = int(os.environ.get("SEFOSS_THREADS", "1") or 1)
    rows = sweep_ood_fraction(cfg, fractions, modes, args.out, threads=max(threads, 1))
    for row in rows:
        print(f"{row['fraction']:g},{row['mode']},{row['acc']:.4f},{row['auroc']:.4f}")
    if args.plots:
        from .plotting import plot_sweep
        plot_sweep(Path(args.out) / "sweep.csv")
    return EXIT_OK


def _eval_params(path) -> ModelParams:
    entries = read_checkpoint(path)
    ema = {k[4:]: v for k, v in entries.items() if k.startswith("ema/")}
    live = {k: v for k, v in entries.items() if "/" not in k}
    params = ModelParams(ema or live)
    if not params.names():
        raise CheckpointError(f"{path}: no model parameters")
    return params


def _unseen_from_data(ds, kind: str, seed: int) -> np.ndarray:
    # class means and spread estimated from the labeled split stand in for the
    # generator's layout
    C = ds.num_classes
    means = np.stack([ds.labeled_x[ds.labeled_y == c].mean(axis=0) for c in range(C)])
    std = float(np.sqrt(np.mean((ds.labeled_x - means[ds.labeled_y]) ** 2)))
    lo, hi = ds.test_id_x.min(axis=0), ds.test_id_x.max(axis=0)
    return make_unseen_ood(np.random.default_rng(seed), kind, len(ds.test_ood_x), means, std, lo, hi)


def cmd_eval(args) -> int:
    from .trainer import dataset_for

    if args.unseen_ood is not None and args.unseen_ood not in OOD_KINDS:
        raise ConfigError(f"--unseen-ood must be one of {OOD_KINDS}", "unseen_ood")
    beta = 1.0
    if args.gen is not None:
        cfg = load_config(args.gen, args.set or ())
        beta = cfg.beta
        ds = dataset_for(cfg, unseen_ood_kind=args.unseen_ood)
        unseen = ds.unseen_ood_x
    else:
        if not Path(args.data).exists():
            raise ArtifactError(f"{args.data}: no such dataset file")
        ds = load_dataset_csv(args.data)
        unseen = None
        if args.unseen_ood is not None:
            unseen = ds.unseen_ood_x if ds.unseen_ood_x is not None else _unseen_from_data(
                ds, args.unseen_ood, args.seed)
    params = _eval_params(args.checkpoint)
    if params["f.0.weight"].shape[0] != ds.test_id_x.shape[1]:
        raise ArtifactError(f"checkpoint expects {params['f.0.weight'].shape[0]} inputs, "
                            f"data has {ds.test_id_x.shape[1]}")

    id_logits = predict_logits(params, ds.test_id_x)
    acc = float(np.mean(np.argmax(id_logits, axis=1) == ds.test_id_y))
    id_e, id_c = free_energy_score(id_logits, beta), softmax_confidence(id_logits)
    splits = [("test_id", False, id_e, id_c)]
    rows = []
    for name, x in (("test", ds.test_ood_x), ("unseen", unseen)):
        if x is None:
            continue
        logits = predict_logits(params, x)
        e, c = free_energy_score(logits, beta), softmax_confidence(logits)
        split = "test_ood" if name == "test" else "unseen_ood"
        splits.append((split, True, e, c))
        rows.append({"split": name, "acc": acc, "auroc_energy": auroc(id_e, e),
                     "auroc_confidence": auroc(-id_c, -c)})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "scores.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "is_ood", "score_energy", "score_confidence"])
        for split, is_ood, e, c in splits:
            for ei, ci in zip(e, c):
                w.writerow([split, int(is_ood), repr(float(ei)), repr(float(ci))])
    with (out / "eval.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "acc", "auroc_energy", "auroc_confidence"])
        for r in rows:
            w.writerow([r["split"], repr(r["acc"]), repr(r["auroc_energy"]), repr(r["auroc_confidence"])])
            print(f"{r['split']}: acc={r['acc']:.4f} auroc_energy={r['auroc_energy']:.4f} "
                  f"auroc_confidence={r['auroc_confidence']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    if args.trials < 1 or not args.eps > 0:
        raise ConfigError("need --trials >= 1 and --eps > 0", "trials" if args.trials < 1 else "eps")
    if args.corrupt:
        with corrupted_adjoint(args.corrupt):
            worst = run_gradcheck(args.trials, args.eps, args.seed)
    else:
        worst = run_gradcheck(args.trials, args.eps, args.seed)
    failed = [t for t, v in worst.items() if not v < GRADCHECK_LIMIT]
    for term, v in worst.items():
        print(f"{term:10s} worst relative error {v:.3e} {'FAIL' if term in failed else 'ok'}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .trainer import dataset_for

    cfg = _config_from(args)
    ds = dataset_for(cfg, unseen_ood_kind=args.unseen_ood)
    hidden = save_dataset_csv(ds, args.out)
    print(args.out)
    print(hidden)
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_metrics, plot_sweep

    run = Path(args.run)
    out = Path(args.out) if args.out else run
    written = []
    if (run / "metrics.csv").exists():
        written += plot_metrics(run / "metrics.csv", out)
    if (run / "sweep.csv").exists():
        written += plot_sweep(run / "sweep.csv", out)
    if not written:
        raise ArtifactError(f"{run}: neither metrics.csv nor sweep.csv found")
    for p in written:
        print(p)
    return EXIT_OK


def cmd_config_doc(args) -> int:
    text = config_markdown()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sefoss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required_out=True):
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--set", nargs="+", metavar="KEY=VALUE", action="extend",
                       help="override config keys after the file")
        p.add_argument("--out", required=required_out, help="output directory")

    p = sub.add_parser("train", help="run one experiment")
    with_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a saved checkpoint")
    p.add_argument("--plots", action="store_true", help="also render figures next to metrics.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-ood-fraction", help="runs over OOD fractions and modes")
    with_config(p)
    p.add_argument("--fractions", default="0,0.25,0.5,0.75,1")
    p.add_argument("--modes", default="sefoss,fixmatch_baseline")
    p.add_argument("--plots", action="store_true", help="also render sweep.png next to sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="score a checkpoint on test and unseen OOD data")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset CSV")
    src.add_argument("--gen", metavar="CONFIG", help="regenerate the dataset from a config file")
    p.add_argument("--set", nargs="+", metavar="KEY=VALUE", action="extend",
                   help="override keys of the --gen config")
    p.add_argument("--unseen-ood", metavar="KIND",
                   help="also score OOD data never seen in training: " + ", ".join(OOD_KINDS))
    p.add_argument("--seed", type=int, default=0, help="seed for unseen OOD drawn from --data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as CSV")
    p.add_argument("--config")
    p.add_argument("--set", nargs="+", metavar="KEY=VALUE", action="extend")
    p.add_argument("--seed", type=int)
    p.add_argument("--unseen-ood", metavar="KIND")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_gen_data, mode=None)

    p = sub.add_parser("report", help="render figures from a run or sweep directory")
    p.add_argument("--run", required=True, help="directory holding metrics.csv and/or sweep.csv")
    p.add_argument("--out", help="figure directory (default: the run directory)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("config-doc", help="print the config key reference (CONFIG.md)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config_doc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataConfigError, ModelConfigError) as exc:
        key = getattr(exc, "key", None)
        print(f"config error{f' [{key}]' if key else ''}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ArtifactError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
