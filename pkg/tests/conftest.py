import numpy as np
import pytest

from abmcal.sim import SimConfig


@pytest.fixture
def small_config():
    """A 600-agent, 60-day city that runs in a few milliseconds."""
    return SimConfig(n_agents=600, n_households=180, n_workplaces=30, horizon=60, n_initial=5,
                     intervention_day=40)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
