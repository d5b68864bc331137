import pytest

from eprsim.core import ExperimentConfig
from eprsim.protocol import run_session

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def default_session():
    return run_session(ExperimentConfig(trials=100_000, master_seed=0))


@pytest.fixture(scope="session")
def default_sessions(default_session):
    """Twenty default-angle sessions of 10^5 trials, seeds 0..19, shared across modules."""
    rest = [run_session(ExperimentConfig(trials=100_000, master_seed=seed)) for seed in range(1, 20)]
    return [default_session, *rest]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
