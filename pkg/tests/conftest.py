import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    from gaussocc.numerics import make_rng

    return make_rng(1234)


def finite_arrays(shape, lo=-5.0, hi=5.0):
    from hypothesis.extra.numpy import arrays
    from hypothesis.strategies import floats

    return arrays(np.float64, shape, elements=floats(lo, hi, allow_nan=False, allow_infinity=False))
