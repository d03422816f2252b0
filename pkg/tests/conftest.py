import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from msmcp.study import StudyConfig, run_study

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_SEED = 20240601
ACCEPTANCE_REPS = 2000


@pytest.fixture(scope="session")
def paper_study():
    """All regimes and criteria over the six (b, N) cells at 2000 replications."""
    config = StudyConfig(replications=ACCEPTANCE_REPS, master_seed=ACCEPTANCE_SEED)
    return run_study(config)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
