import numpy as np
import pytest

from lrcssm.cell import LrcLayerParams
from lrcssm.model import init_layer_params

PARAM_FIELDS = ("g_max_x", "g_max_u", "k_max_x", "k_max_u", "a_x", "b_x",
                "a_u", "b_u_bias", "g_leak", "e_leak", "w_x", "v_x", "w_u",
                "v_u_bias")


def make_params(rng, d, n, dtype=np.float64) -> LrcLayerParams:
    """Default-initialized cell parameters for property tests."""
    return init_layer_params(rng, d, n, dtype)


def zero_params(d, n, dtype=np.float64) -> LrcLayerParams:
    kwargs = {}
    for name in PARAM_FIELDS:
        shape = (d, n) if name in ("a_u", "w_u") else (d,)
        kwargs[name] = np.zeros(shape, dtype)
    return LrcLayerParams(**kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
