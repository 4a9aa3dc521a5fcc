import numpy as np
import pytest
from hypothesis import settings

from nova import defaults
from nova.engine import RunConfig, run_generation
from nova.model import ModelConfig, ScaleSchedule, build_model
from nova.scheduler import SchedulerMode

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

# Scale means of the two-phase worked trace, padded to T=10 with a flat tail.
WORKED_MEANS = (1.0, 2.0, 3.0, 4.0, 5.0, 5.4, 5.5, 5.55, 5.58, 5.6)


@pytest.fixture(scope="session")
def default_model_config():
    return ModelConfig(ScaleSchedule.square(defaults.SCALE_SIDES))


@pytest.fixture(scope="session")
def default_model(default_model_config):
    return build_model(default_model_config)


@pytest.fixture(scope="session")
def dense_run(default_model_config, default_model):
    return run_generation(RunConfig(model=default_model_config, mode=SchedulerMode.OFF), default_model)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(ScaleSchedule.square((1, 2, 3, 4, 6)), vocab_size=16, dim=16, layers=2,
                       heads=2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
