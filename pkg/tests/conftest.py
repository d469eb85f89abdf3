import numpy as np
import pytest
from hypothesis import strategies as st

from overid.scm import ScmParams


def prior_params(rng, n, min_abs=0.05):
    """``n`` parameter draws from the uniform prior used in the MAPE study."""
    out = []
    while len(out) < n:
        a, b, c, d = rng.uniform(-10, 10, size=4)
        v = rng.uniform(0.01, 2.0, size=4)
        if abs(a) >= min_abs and abs(c) >= min_abs:
            out.append(ScmParams(a, b, c, d, *v))
    return out


coef = st.floats(-10, 10, allow_nan=False)
variance = st.floats(0.01, 2.0, allow_nan=False)
params_strategy = st.builds(ScmParams, coef, coef, coef, coef, variance, variance, variance, variance)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
