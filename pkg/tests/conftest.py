import numpy as np
import pytest
from hypothesis import settings

from helpers import tiny_blobs

# property tests build real models; wall-clock deadlines only add flake
settings.register_profile("suite", deadline=None)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs3():
    """Small 3-class training set shared read-only across tests."""
    return tiny_blobs(classes=3, per_class=12)


@pytest.fixture(scope="session")
def blobs3_test():
    return tiny_blobs(classes=3, per_class=8, seed=6, split="test")
