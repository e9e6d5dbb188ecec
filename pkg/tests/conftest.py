import math
import warnings

import numpy as np
import pytest

from koopgame.benchmarks import example2_problem, example3_problem, f16_problem
from koopgame.errors import PoorFitWarning

ACCEPTANCE_RESULTS = {}


@pytest.fixture(autouse=True)
def _quiet_poor_fit():
    # poor fits are expected whenever a policy is not polynomial
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PoorFitWarning)
        yield


@pytest.fixture(scope="session")
def f16():
    return f16_problem()


@pytest.fixture(scope="session")
def ex2_hjb():
    return example2_problem(math.inf)


@pytest.fixture(scope="session")
def ex2_hji():
    return example2_problem(5.0)


@pytest.fixture(scope="session")
def ex3():
    return example3_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
