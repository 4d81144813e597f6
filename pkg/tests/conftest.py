import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rlsmerge.adapters import LayerId

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def layer():
    return LayerId(0, "q_proj")


def rel(a, b) -> float:
    """Relative Frobenius distance of ``a`` from reference ``b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (denom if denom else 1.0))
