import numpy as np
import pytest

from cadis.nn import ModelParams, NetworkShape, init_params


def make_positive_rep_params(
    shape: NetworkShape, rng: np.random.Generator
) -> ModelParams:
    """Random params whose representations are strictly positive for x >= 0.

    The last feature layer gets non-negative weights and a strictly positive
    bias; since its inputs are ReLU outputs (or raw non-negative features),
    every representation coordinate stays strictly positive.
    """
    params = init_params(shape, rng)
    w_last, b_last = params.feature_layers()[-1]
    np.abs(w_last, out=w_last)
    b_last[:] = rng.uniform(0.05, 0.5, size=b_last.shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
