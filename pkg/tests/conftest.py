import numpy as np
import pytest
from scipy import ndimage

from safeperi.dataset import EyeAnnotation


def textured(shape, seed=0, smooth=2.0):
    """Band-limited random texture rescaled to [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    t = ndimage.gaussian_filter(rng.standard_normal(shape), smooth)
    t = (t - t.min()) / (t.max() - t.min())
    return 0.1 + 0.8 * t


def annotation(cx, cy, r, name="img.png", subject="s000", eye="L", session=1, tag="D1"):
    return EyeAnnotation(name, subject, eye, session, tag, float(cx), float(cy), float(r),
                         float(cx), float(cy), float(r) / 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
