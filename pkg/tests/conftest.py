import numpy as np
import pytest

from protofg3d.pool import PrototypePool, normalize_rows

# acceptance lines, printed once at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pool(rng, C, K, D):
    return PrototypePool(normalize_rows(rng.normal(size=(C, K, D))))
