import functools

import numpy as np
import pytest

from kladapt import moore_greitzer as mg
from kladapt.sim import integrate

REFERENCE_X0 = ((0.4, -1.0), (0.6, 0.5))


@functools.lru_cache(maxsize=None)
def mg_run(which: str, x0: tuple, t_end: float = 20.0, theta=(-1.5, -0.5)):
    cfg = mg.ExampleConfig(theta_true=theta)
    loop = mg.closed_loop(which, cfg)
    return integrate(loop, x0, (0.0, 0.0), t_end)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[num])
