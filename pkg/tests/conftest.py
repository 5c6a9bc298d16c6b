import numpy as np
import pytest

from foxacp.core import AttentionInputs, Rng
from foxacp.decay import GateTrace


def random_head(rng, L, d, decay=0.3, scale=1.0):
    """Random q/k/v plus exponential-ish log-gates with mean ``-decay``."""
    q, k, v = (rng.normal(0.0, scale, (L, d)) for _ in range(3))
    log_f = -rng.gen.exponential(decay, L) if decay > 0 else np.zeros(L)
    return GateTrace.from_log_gates(log_f), AttentionInputs(q, k, v)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def make_head():
    return random_head


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
