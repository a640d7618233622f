import numpy as np
import pytest

from havit.attention import AttentionLayerParams
from havit.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_layer_params(rng, d_model=8, num_heads=2, scale=0.5, requires_grad=False):
    def t(*shape, base=0.0):
        return Tensor(base + scale * rng.standard_normal(shape), requires_grad=requires_grad)

    return AttentionLayerParams(
        w_q=t(d_model, d_model), w_k=t(d_model, d_model), w_v=t(d_model, d_model),
        w_o=t(d_model, d_model), b_o=t(d_model),
        ln_gamma=t(d_model, base=1.0), ln_beta=t(d_model),
        num_heads=num_heads,
    )


@pytest.fixture
def layer_params(rng):
    return random_layer_params(rng)
