import numpy as np
import pytest

from chemorepulsion.fem import make_spaces
from chemorepulsion.mesh import unit_square_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def mesh4():
    return unit_square_mesh(4)


@pytest.fixture(scope="session")
def spaces4(mesh4):
    return make_spaces(mesh4)


@pytest.fixture(scope="session")
def spaces8():
    return make_spaces(unit_square_mesh(8))


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "SUMMARY", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
