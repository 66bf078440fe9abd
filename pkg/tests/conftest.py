import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests import _ledger
    if _ledger.LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ledger.LINES:
            terminalreporter.write_line(line)
