import numpy as np
import pytest

from changecrf.types import ImagePair


def random_pair(rng, h=8, w=8, id=""):
    return ImagePair(rng.random((h, w, 3)), rng.random((h, w, 3)), id)


def square_pair(size=32, top=8, left=10, side=12, color=(0.9, 0.1, 0.1), base=0.4):
    """Flat grey pair with one coloured square painted into the first image."""
    a = np.full((size, size, 3), base)
    b = a.copy()
    a[top : top + side, left : left + side] = color
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[top : top + side, left : left + side] = 1
    return ImagePair(a, b, "square"), mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
