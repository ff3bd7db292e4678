import numpy as np
import pytest

from spherevid.tensor import Rng


def central_diff(f, arr, idx, h=1e-6):
    """Central difference of scalar ``f`` w.r.t. ``arr.flat[idx]`` (perturbed in place)."""
    flat = arr.reshape(-1)
    orig = flat[idx]
    flat[idx] = orig + h
    fp = f()
    flat[idx] = orig - h
    fm = f()
    flat[idx] = orig
    return (fp - fm) / (2 * h)


def max_rel_err(analytic, f, arr, probes=32, seed=0, h=1e-6, floor=1e-8):
    rng = np.random.default_rng(seed)
    flat = analytic.reshape(-1)
    picks = rng.choice(arr.size, size=min(probes, arr.size), replace=False)
    worst = 0.0
    scale = max(float(np.abs(flat).max()), floor)
    for k in picks:
        num = central_diff(f, arr, k, h)
        denom = max(abs(flat[k]), abs(num), 1e-3 * scale)
        worst = max(worst, abs(flat[k] - num) / denom)
    return worst


@pytest.fixture
def rng():
    return Rng(1234)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
