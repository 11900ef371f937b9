import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from app.models.config_models import PhantomSpec
from app.models.raster_models import Image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def speckle_image(rng):
    """Random textured image with enough structure for block matching."""
    return Image(gaussian_filter(rng.standard_normal((96, 96)), 1.2))


@pytest.fixture
def small_phantom():
    return PhantomSpec(rows=64, cols=64, n_scatterers=600, focus_row=32)
