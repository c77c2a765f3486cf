import numpy as np
import pytest

from surflab import atlas as atl
from surflab import dynamics as dyn


@pytest.fixture(scope="session")
def g2():
    return atl.build_surface(2, "pure")


@pytest.fixture(scope="session")
def g3():
    return atl.build_surface(3, "pure")


@pytest.fixture(scope="session")
def g2_table(g2):
    return dyn._passages(g2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
