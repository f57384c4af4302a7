import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(f, x, coords, step=1e-5):
    """Central differences of scalar ``f`` at the flat indices ``coords`` of ``x``."""
    out = []
    flat = x.reshape(-1)
    for c in coords:
        old = flat[c]
        flat[c] = old + step
        up = f()
        flat[c] = old - step
        down = f()
        flat[c] = old
        out.append((up - down) / (2 * step))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
