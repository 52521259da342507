import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from causalforest.data import Dataset  # noqa: E402


def make_data(n=200, p=3, seed=0, tau=1.0, oracle=True):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    W = rng.binomial(1, 0.5, n).astype(float)
    Y = X[:, 0] + tau * W + rng.normal(size=n)
    return Dataset(X=X, feature_names=[f"x{j + 1}" for j in range(p)], W=W, Y=Y,
                   e_oracle=np.full(n, 0.5) if oracle else None)


@pytest.fixture
def small_data():
    return make_data()


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail, seconds, budget):
    """Log one acceptance criterion; the lines are echoed in the terminal summary."""
    ok = passed and seconds < budget
    line = (f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail} "
            f"[{seconds:.1f}s / {budget:.0f}s]")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
