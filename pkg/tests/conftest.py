import numpy as np
import pytest

from dissipaton_pinn.config import RunConfig
from dissipaton_pinn.driver import build_problem


@pytest.fixture(scope="session")
def anderson():
    """High-temperature Anderson quench on the filtered basis (default config)."""
    return build_problem(RunConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
