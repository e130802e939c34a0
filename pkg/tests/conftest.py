import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from gaugerl.invariance import candidate_gains, gain_search  # noqa: E402
from gaugerl.plant import default_case_path, load_case  # noqa: E402


@pytest.fixture(scope="session")
def grid_case():
    return load_case(default_case_path())


@pytest.fixture(scope="session")
def grid_system(grid_case):
    return grid_case.safety_system()


@pytest.fixture(scope="session")
def grid_synthesis(grid_system):
    return gain_search(grid_system, candidate_gains(grid_system))


@pytest.fixture(scope="session")
def grid_cert(grid_synthesis):
    return grid_synthesis.certificate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
