import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from univadapt.sysmodel import ParameterBox

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

EX1_BOX = ParameterBox(np.array([-0.2, 0.2]), np.array([0.4, 0.6]))
EX2_BOX = ParameterBox(np.array([-0.4, -1.0, -0.6, -1.75]), np.array([0.5, 0.6, 0.75, 0.4]))
EX2_THETA = np.array([-0.3, -0.8, -0.25, -0.75])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
