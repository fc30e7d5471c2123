import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvaformer import autodiff as ad

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def t64(values, grad=False):
    return ad.Tensor(np.asarray(values, dtype=np.float64), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
