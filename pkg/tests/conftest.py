import numpy as np
import pytest

from stackop.process import BrownianEnsemble, HorizonConfig


@pytest.fixture(scope="session")
def grid64():
    return HorizonConfig(T=1.0, M=64)


@pytest.fixture(scope="session")
def ens64(grid64):
    return BrownianEnsemble(grid64, 2000, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
