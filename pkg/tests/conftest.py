import os
import sys

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def pretrained_main():
    """A Main agent with its language model pretrained once per session."""
    from abya.agent import Agent
    from abya.training import pretrain_lm

    agent = Agent("main", seed=0)
    result = pretrain_lm(agent, seed=0)
    return agent, result


def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
