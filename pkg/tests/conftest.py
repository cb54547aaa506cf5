import numpy as np
import pytest

import npse


@pytest.fixture(scope="session")
def sch():
    return npse.make_schedule()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


class ZeroRng:
    """Test hook standing in for a Generator that emits zero noise."""

    def standard_normal(self, shape=None):
        return np.zeros(shape) if shape is not None else 0.0


def central_diff(f, x, i, h=1e-6):
    """Central finite difference of scalar f along coordinate i of x."""
    xp = np.array(x, dtype=float)
    xm = np.array(x, dtype=float)
    xp[i] += h
    xm[i] -= h
    return (f(xp) - f(xm)) / (2.0 * h)
