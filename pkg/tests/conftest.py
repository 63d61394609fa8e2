import numpy as np
import pytest

from pwcf import ShiftSpec, generate_synthetic_pair


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_pair():
    """A quick two-domain problem: 4 classes, 12 dims, 60 + 60 samples."""
    return generate_synthetic_pair(4, 12, 60, 60, ShiftSpec(20.0, 2.0, 0.2), seed=7,
                                   class_sep=3.0, nuisance_dim=4, nuisance_std=1.0)

