import numpy as np
import pytest

from histlab.qstate import GridSpec, SystemConfig, init_gaussian, superpose


@pytest.fixture
def free():
    return SystemConfig()


@pytest.fixture
def grid1():
    return GridSpec((128.0,), (512,))


@pytest.fixture
def grid2():
    return GridSpec((64.0, 64.0), (64, 64))


@pytest.fixture
def mirror_state(grid2, free):
    # small-scale mirror-packet pair, separated in y
    a = init_gaussian(grid2, free, (-12.0, 10.0), (0.8, -0.8), 3.0)
    b = init_gaussian(grid2, free, (-12.0, -10.0), (0.8, 0.8), 3.0)
    return superpose([(2**-0.5, a), (2**-0.5, b)])[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    for mod in list(sys.modules.values()):
        results = getattr(mod, "ACCEPTANCE_RESULTS", None)
        if results:
            terminalreporter.section("acceptance criteria")
            for k in sorted(results):
                terminalreporter.write_line(results[k])
            break
