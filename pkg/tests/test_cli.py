import csv
import json
import math
import struct
import subprocess
import sys
from pathlib import Path

import pytest

from sefoss.cli import main

TINY = """\
# tiny run for command-line tests
K = 10
K_p = 5
eval_every = 5
B = 8
mu = 2
n_unlabeled = 200
n_test_per_class = 25
n_test_ood = 50
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_smoke(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out), "--set", "K=10", "K_p=5"]) == 0
    rows = read_rows(out / "metrics.csv")
    assert [r["step"] for r in rows] == ["5", "10"]
    assert (out / "final.sfos").exists() and (out / "config.txt").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["K"] == 10 and summary["config"]["w_s"] == 5.0
    assert "auroc_energy=" in capsys.readouterr().out


def test_train_mode_echo(config, tmp_path):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r"), "--mode", "supervised"]) == 0
    assert json.loads((tmp_path / "r" / "summary.json").read_text())["mode"] == "supervised"


def test_train_is_byte_reproducible(config, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(config), "--out", str(tmp_path / name), "--seed", "7"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_resume_matches(config, tmp_path):
    args = ["train", "--config", str(config), "--set", "checkpoint_every=3"]
    assert main([*args, "--out", str(tmp_path / "full")]) == 0
    ckpt = tmp_path / "full" / "checkpoint_0000006.sfos"
    assert main([*args, "--out", str(tmp_path / "full"), "--resume", str(ckpt)]) == 0
    assert main([*args, "--out", str(tmp_path / "fresh")]) == 0
    for name in ("metrics.csv", "final.sfos"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "fresh" / name).read_bytes()


def test_bad_key_exits_2(config, tmp_path, capsys):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r"), "--set", "lr=0.1"]) == 2
    assert "lr" in capsys.readouterr().err


def test_bad_number_exits_2(config, tmp_path, capsys):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r"), "--set", "K=ten"]) == 2
    assert "[K]" in capsys.readouterr().err


def test_invalid_value_exits_2(config, tmp_path):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r"), "--mode", "x"]) == 2


def test_missing_config_file_exits_3(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "r")]) == 3


def test_train_with_plots(config, tmp_path):
    out = tmp_path / "r"
    assert main(["train", "--config", str(config), "--out", str(out), "--plots"]) == 0
    for name in ("scores.png", "losses.png", "mask_rates.png"):
        assert (out / name).stat().st_size > 0


# --- sweep -------------------------------------------------------------------------

def test_sweep_single_fraction(config, tmp_path):
    out = tmp_path / "s"
    assert main(["sweep-ood-fraction", "--config", str(config), "--fractions", "0", "--modes", "sefoss",
                 "--out", str(out)]) == 0
    rows = read_rows(out / "sweep.csv")
    assert len(rows) == 1
    assert list(rows[0]) == ["fraction", "mode", "acc", "auroc"]
    assert 0.0 <= float(rows[0]["auroc"]) <= 1.0


def test_sweep_cardinality_and_plot(config, tmp_path):
    out = tmp_path / "s"
    assert main(["sweep-ood-fraction", "--config", str(config), "--fractions", "0,0.5,1",
                 "--modes", "sefoss,fixmatch_baseline", "--out", str(out), "--plots"]) == 0
    rows = read_rows(out / "sweep.csv")
    assert len(rows) == 6
    assert {(r["fraction"], r["mode"]) for r in rows} == {
        (f, m) for f in ("0.0", "0.5", "1.0") for m in ("sefoss", "fixmatch_baseline")}
    assert (out / "sweep.png").exists()
    assert (out / "sefoss_frac0.500" / "metrics.csv").exists()


def test_sweep_rejects_bad_fraction(config, tmp_path):
    assert main(["sweep-ood-fraction", "--config", str(config), "--fractions", "1.5",
                 "--out", str(tmp_path / "s")]) == 2
    assert main(["sweep-ood-fraction", "--config", str(config), "--modes", "nope",
                 "--out", str(tmp_path / "s")]) == 2


# --- eval ------------------------------------------------------------------------

@pytest.fixture
def trained(config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    return out


def test_eval_reproduces_logged_auroc(trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "final.sfos"), "--gen", str(trained / "config.txt"),
                 "--out", str(out)]) == 0
    logged = read_rows(trained / "metrics.csv")[-1]
    row = read_rows(out / "eval.csv")[0]
    assert row["split"] == "test"
    assert float(row["auroc_energy"]) == float(logged["auroc_energy"])
    assert float(row["auroc_confidence"]) == float(logged["auroc_confidence"])
    assert float(row["acc"]) == float(logged["acc_id"])


def test_eval_unseen_ood(trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "final.sfos"), "--gen", str(trained / "config.txt"),
                 "--unseen-ood", "uniform_noise", "--out", str(out)]) == 0
    rows = {r["split"]: r for r in read_rows(out / "eval.csv")}
    assert set(rows) == {"test", "unseen"}
    assert math.isfinite(float(rows["unseen"]["auroc_energy"]))
    scores = read_rows(out / "scores.csv")
    assert list(scores[0]) == ["split", "is_ood", "score_energy", "score_confidence"]
    assert {r["split"] for r in scores} == {"test_id", "test_ood", "unseen_ood"}


def test_eval_from_exported_data(trained, tmp_path, capsys):
    data = tmp_path / "data.csv"
    assert main(["gen-data", "--config", str(trained / "config.txt"), "--out", str(data)]) == 0
    printed = capsys.readouterr().out.split()
    assert printed == [str(data), str(tmp_path / "data.hidden.csv")]
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(trained / "final.sfos"), "--data", str(data),
                 "--unseen-ood", "extra_clusters", "--out", str(out)]) == 0
    rows = {r["split"]: r for r in read_rows(out / "eval.csv")}
    logged = read_rows(trained / "metrics.csv")[-1]
    assert float(rows["test"]["auroc_energy"]) == float(logged["auroc_energy"])
    assert math.isfinite(float(rows["unseen"]["auroc_energy"]))


def test_eval_version_mismatch_exits_3(trained, tmp_path):
    raw = bytearray((trained / "final.sfos").read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    bad = tmp_path / "bad.sfos"
    bad.write_bytes(bytes(raw))
    assert main(["eval", "--checkpoint", str(bad), "--gen", str(trained / "config.txt"),
                 "--out", str(tmp_path / "ev")]) == 3


def test_eval_missing_inputs_exit_3(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.sfos"), "--gen", str(trained / "config.txt"),
                 "--out", str(tmp_path / "ev")]) == 3
    assert main(["eval", "--checkpoint", str(trained / "final.sfos"), "--data", str(tmp_path / "x.csv"),
                 "--out", str(tmp_path / "ev")]) == 3


def test_eval_bad_unseen_kind_exits_2(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "final.sfos"), "--gen", str(trained / "config.txt"),
                 "--unseen-ood", "images", "--out", str(tmp_path / "ev")]) == 2


def test_eval_pretraining_checkpoint_reports_both_scores(config, tmp_path):
    run = tmp_path / "pre"
    assert main(["train", "--config", str(config), "--set", "K_p=10", "--out", str(run)]) == 0
    assert main(["eval", "--checkpoint", str(run / "final.sfos"), "--gen", str(run / "config.txt"),
                 "--out", str(tmp_path / "ev")]) == 0
    row = read_rows(tmp_path / "ev" / "eval.csv")[0]
    assert 0.0 <= float(row["auroc_energy"]) <= 1.0 and 0.0 <= float(row["auroc_confidence"]) <= 1.0


# --- gradcheck, report, config-doc --------------------------------------------------

def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for term in ("l_l", "l_s", "l_p", "l_e", "l_w", "composite"):
        assert term in out


@pytest.mark.parametrize("op", ["matmul", "row_log_sum_exp", "relu"])
def test_gradcheck_corruption_exits_1(op, capsys):
    assert main(["gradcheck", "--trials", "2", "--corrupt", op]) == 1
    assert "failed for" in capsys.readouterr().err


def test_gradcheck_bad_arguments():
    assert main(["gradcheck", "--trials", "0"]) == 2
    assert main(["gradcheck", "--eps", "0"]) == 2


def test_report(trained, tmp_path, capsys):
    assert main(["report", "--run", str(trained), "--out", str(tmp_path / "figs")]) == 0
    assert len(capsys.readouterr().out.split()) == 3
    assert main(["report", "--run", str(tmp_path / "empty")]) == 3


def test_config_doc_matches_repository_file(tmp_path):
    assert main(["config-doc", "--out", str(tmp_path / "c.md")]) == 0
    repo_doc = Path(__file__).resolve().parents[1] / "CONFIG.md"
    assert (tmp_path / "c.md").read_text() == repo_doc.read_text()


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "sefoss", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    assert "gradcheck" in done.stdout
