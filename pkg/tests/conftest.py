import numpy as np
import pytest

from lasafl.update import UpdateBatch, make_layout

ACCEPTANCE_LINES: list[str] = []


def random_batch(rng, n, dims, names=None, scale=1.0):
    names = names or [f"l{i}" for i in range(len(dims))]
    layout = make_layout(zip(names, dims))
    return UpdateBatch.from_matrix(rng.normal(0, scale, (n, sum(dims))), layout, tuple(range(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
