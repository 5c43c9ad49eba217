import numpy as np
import pytest

from drmkit.model import ShallowRM


@pytest.fixture
def toy2x2():
    """Two classes, two nuisances, unit noise, uniform priors."""
    t = np.array([[[1.0, 0.0], [0.0, 1.0]], [[-1.0, 0.0], [0.0, -1.0]]])
    return ShallowRM([0.5, 0.5], [0.5, 0.5], t, 1.0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
