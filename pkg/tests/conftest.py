import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from particle_rml.models import ar1_family, sv_family


@pytest.fixture
def ar1_tight():
    """AR(1) on a small box: densities are O(1), good for exact identities."""
    return ar1_family(sigma_x=1.0, sigma_y=0.8, x_box=(-3.0, 3.0), y_box=(-4.0, 4.0))


@pytest.fixture
def ar1_wide():
    """AR(1) on the wide box bundled for estimation runs."""
    return ar1_family(sigma_x=1.0, sigma_y=1.0, x_box=(-20.0, 20.0), y_box=(-22.0, 22.0))


@pytest.fixture
def sv_model():
    return sv_family(obs_scale=0.8, x_box=(-5.0, 5.0), y_box=(-30.0, 30.0))


@pytest.fixture
def gen():
    return np.random.default_rng(20240811)
