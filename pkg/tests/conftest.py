import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from steerlab.harness.config import ExperimentConfig
from steerlab.harness.pipeline import Experiment

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])


@pytest.fixture
def acceptance_log(request):
    """Record a one-line verdict for an acceptance criterion; echoed in the terminal summary."""
    store = request.config.stash[ACCEPTANCE_KEY]

    def record(n: int, passed: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'} - {detail}"
        store[n] = line
        print(line)

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_CONFIG = ExperimentConfig(n_records=120, forget_ratio=0.1, d=128, plant_steps=500)


@pytest.fixture(scope="session")
def small_experiment():
    """A quickly planted experiment shared by the harness tests."""
    ex = Experiment(SMALL_CONFIG)
    ex.model
    return ex


@pytest.fixture(scope="session")
def small_artifacts(small_experiment):
    return small_experiment.build()
