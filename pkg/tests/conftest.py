import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ildet.data import WorldSpec
from ildet.experiments import ExperimentConfig

settings.register_profile("ildet", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ildet")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(**changes) -> ExperimentConfig:
    """A run small enough for unit tests (seconds, not minutes)."""
    base = dict(world=WorldSpec(n_proposals=140), old_classes=(1, 2), new_classes=(3, 4),
                n_train=24, n_val=8, n_test=12, phase1_steps=60, phase1_decay_step=45,
                phase2_steps_per_class=20, eval_every=0, fisher_batches=4, ewc_grid=(1.0, 100.0),
                lambdas=(0.1, 1.0))
    base.update(changes)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config()


# acceptance verdict lines, echoed at the end of the session
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
