import warnings

import numpy as np
import pytest
from hypothesis import settings

from nhtori import torus_solver as ts
from nhtori.model import ModelParams

warnings.filterwarnings("ignore", message=".*TBB.*")

settings.register_profile("nhtori", max_examples=30, deadline=None)
settings.load_profile("nhtori")

GOLDEN = np.pi * (np.sqrt(5.0) - 1.0)   # rotation (sqrt5 - 1)/2 turns


@pytest.fixture(scope="session")
def ref_params():
    return ModelParams(d=1, m=1, gamma=1.0, delta=-1.0, amp=[0.0], alpha=[GOLDEN])


@pytest.fixture(scope="session")
def forced_params():
    return ModelParams(d=1, m=1, gamma=1.0, delta=-1.0, amp=[0.1], alpha=[GOLDEN])


@pytest.fixture(scope="session")
def ref_det(ref_params):
    return ts.solve_K0(ref_params, modes=(8,), tol_inv=1e-12)


@pytest.fixture(scope="session")
def forced_det(forced_params):
    return ts.solve_K0(forced_params, modes=(16,), tol_inv=1e-10)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
