import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from foliation.lpsolver import setup_foliation  # noqa: E402
from foliation.model import get_problem  # noqa: E402


@functools.lru_cache(maxsize=None)
def cached_setup(name: str, **kw):
    entry = get_problem(name)
    return entry, setup_foliation(entry.model, entry.u_star, **kw)


@pytest.fixture(scope="session")
def line_stable():
    return cached_setup("line-stable")


@pytest.fixture(scope="session")
def line_hyperbolic():
    return cached_setup("line-hyperbolic")


@pytest.fixture(scope="session")
def linear_diag():
    # examples and acceptance use norms up to 0.3, above the default radius min(0.2, rho_0)
    return cached_setup("linear-diag", rho_0=0.3, radius=0.3)


@pytest.fixture(scope="session")
def parabola():
    return cached_setup("parabola-stable")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
