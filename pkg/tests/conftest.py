import time

import pytest

from sefoss.config import RunConfig
from sefoss.trainer import run_experiment

FROZEN_SEED = 0

# every run needed by the method-level checks, on the default benchmark
DEFAULT_RUNS = {
    "sefoss": {},
    "fixmatch_baseline": {"mode": "fixmatch_baseline"},
    "supervised": {"mode": "supervised"},
    "ls_only": {"use_lp": False, "use_le": False},
    "pretrain_only": {"K": 750, "K_p": 750},
}


def small_config(**kw):
    args = dict(K=40, K_p=10, eval_every=10, B=16, mu=2, n_unlabeled=400, n_test_per_class=50,
                n_test_ood=100, seed=3)
    args.update(kw)
    return RunConfig(**args)


@pytest.fixture(scope="session")
def default_runs():
    """name -> (RunResult, wall seconds) at the frozen seed, computed once."""
    out = {}
    for name, changes in DEFAULT_RUNS.items():
        t0 = time.perf_counter()
        result = run_experiment(RunConfig(seed=FROZEN_SEED, **changes))
        out[name] = (result, time.perf_counter() - t0)
    return out


# one line per acceptance criterion, shown at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
