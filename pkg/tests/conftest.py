import numpy as np
import pytest

from wsqa.raster import DAPI, PANHISTONE, AnnotationSet, ChannelStack, InstanceMask


def disc_bits(shape, cy, cx, r):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rect_mask(mask_id, x, y, w, h, frame=(64, 64)):
    g = np.zeros(frame, dtype=bool)
    g[y : y + h, x : x + w] = True
    return InstanceMask.from_bitmask(mask_id, g)


def mask_from_bits(mask_id, bits):
    return InstanceMask.from_bitmask(mask_id, bits)


@pytest.fixture
def bright_tile():
    """128x128 nuclear tile with two bright discs on a noisy background."""
    rng = np.random.default_rng(11)
    h = w = 128
    d1 = disc_bits((h, w), 40, 40, 10)
    d2 = disc_bits((h, w), 88, 88, 12)
    img = rng.integers(800, 1200, (h, w)).astype(np.uint16)
    img[d1 | d2] = 45000
    stack = ChannelStack(np.stack([img, img.copy()]), (DAPI, PANHISTONE))
    aset = AnnotationSet(
        "t",
        (InstanceMask.from_bitmask(1, d1), InstanceMask.from_bitmask(2, d2)),
        "filtered",
    )
    return stack, aset
