import numpy as np
import pytest

from rize.mdp import TabularMDP

# (criterion number, name, passed, measured, detail) rows printed after the run
ACCEPTANCE_ROWS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_ROWS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, passed, detail in sorted(ACCEPTANCE_ROWS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{num:>2}] {name}: {detail}")


def single_state(reward, gamma=0.0):
    reward = np.atleast_2d(np.asarray(reward, dtype=float))
    A = reward.shape[1]
    return TabularMDP(np.ones((1, A, 1)), reward, gamma, np.ones(1), name="one-state")


def two_state_cycle(gamma=0.5):
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 0] = 1.0
    return TabularMDP(P, np.zeros((2, 1)), gamma, np.array([1.0, 0.0]), name="cycle")


def deterministic_chain(n=4, gamma=0.9):
    """Action 0 steps left, action 1 steps right; reward 1 for acting in the last state."""
    P = np.zeros((n, 2, n))
    for s in range(n):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, n - 1)] = 1.0
    r = np.zeros((n, 2))
    r[n - 1] = 1.0
    mu = np.zeros(n)
    mu[0] = 1.0
    return TabularMDP(P, r, gamma, mu, name="chain")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def preset_runs():
    """The grid5x5 preset matrix: 5 seeds x {3, 10} demos for RIZE, plus BC. Trained once."""
    import time
    from pathlib import Path

    from rize.config import load_config
    from rize.demos import load_demos
    from rize.trainer import train

    root = Path(__file__).resolve().parents[1] / "configs"
    out = {"records": {}, "bc": {}, "seconds": 0.0}
    t0 = time.perf_counter()
    for n in (3, 10):
        config = load_config(root / f"grid5x5-rize-{n}demos.toml")
        demos = load_demos(config.demos)
        for spec in config.runs():
            rec = train(spec.trainer, spec.mdp_id, demos)
            bucket = out["records"] if spec.name == "rize" else out["bc"]
            bucket.setdefault(n, []).append(rec)
    out["seconds"] = time.perf_counter() - t0
    return out
