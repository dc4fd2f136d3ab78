import numpy as np
import pytest

from phantomhaz.hazard import PiecewiseHazard, WaitTimeDensity


def random_pem(rng, max_breaks=4, log_h_range=(-8.0, -3.0)):
    """A random piecewise-exponential hazard with a few breakpoints."""
    k = int(rng.integers(0, max_breaks + 1))
    bp = np.sort(rng.uniform(1.0, 120.0, size=k))
    bp = np.unique(np.round(bp, 3))
    lh = rng.uniform(*log_h_range, size=len(bp) + 1)
    return PiecewiseHazard(tuple(bp.tolist()), tuple(lh.tolist()))


@pytest.fixture
def pem_7_28():
    return PiecewiseHazard((7.0, 28.0), (np.log(0.02), np.log(0.01), np.log(0.005)))


@pytest.fixture
def f_inf_7_28(pem_7_28):
    return WaitTimeDensity.from_hazard(pem_7_28)
