"""Shared fixtures: one fully trained toy stack per test session.

Training the stack takes about half a minute; every test that needs
trained components shares this one, built from a single master seed so
the whole suite is reproducible.
"""

import numpy as np
import pytest

from diffusec.harness import ExperimentConfig, TrainedStack, train_stack, train_stack_agent

MASTER_SEED = 7


@pytest.fixture(scope="session")
def toy_cfg() -> ExperimentConfig:
    return ExperimentConfig(seed=MASTER_SEED)


@pytest.fixture(scope="session")
def stack(toy_cfg) -> TrainedStack:
    return train_stack(toy_cfg)


@pytest.fixture(scope="session")
def agent_run(stack):
    """Trained step-selection nets plus the per-step training log."""
    return train_stack_agent(stack)
