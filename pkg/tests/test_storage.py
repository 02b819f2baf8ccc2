import numpy as np
import pytest

from wsqa.raster import ChannelStack
from wsqa.storage import (
    load_stack,
    load_stack_dir,
    load_stack_tiff,
    save_stack_dir,
    save_stack_tiff,
)


@pytest.fixture
def stack():
    rng = np.random.default_rng(0)
    samples = rng.integers(0, 60000, (3, 12, 17)).astype(np.uint16)
    return ChannelStack(samples, ("DAPI", "PanHistone", "NeuN"))


def test_tiff_round_trip_with_names(tmp_path, stack):
    path = tmp_path / "s.tif"
    save_stack_tiff(path, stack)
    back = load_stack_tiff(path)
    assert back.channel_names == stack.channel_names
    assert np.array_equal(back.samples, stack.samples)


def test_tiff_name_override(tmp_path, stack):
    path = tmp_path / "s.tif"
    save_stack_tiff(path, stack)
    back = load_stack_tiff(path, channel_names=["a", "b", "c"])
    assert back.channel_names == ("a", "b", "c")


def test_dir_round_trip_png(tmp_path, stack):
    save_stack_dir(tmp_path / "d", stack, fmt="png")
    back = load_stack_dir(tmp_path / "d", channel_names=stack.channel_names)
    assert np.array_equal(back.samples, stack.samples)


def test_dir_round_trip_tif(tmp_path, stack):
    save_stack_dir(tmp_path / "d", stack, fmt="tif")
    back = load_stack_dir(tmp_path / "d", channel_names=stack.channel_names)
    assert np.array_equal(back.samples, stack.samples)


def test_dir_default_order_is_sorted(tmp_path, stack):
    save_stack_dir(tmp_path / "d", stack)
    back = load_stack_dir(tmp_path / "d")
    assert back.channel_names == tuple(sorted(stack.channel_names))


def test_load_stack_dispatch(tmp_path, stack):
    save_stack_tiff(tmp_path / "s.tif", stack)
    save_stack_dir(tmp_path / "d", stack)
    assert load_stack(tmp_path / "s.tif").channel_names == stack.channel_names
    assert load_stack(tmp_path / "d", stack.channel_names).width == stack.width
    with pytest.raises(ValueError):
        load_stack(tmp_path / "nope.bin")


def test_missing_channel_file(tmp_path, stack):
    save_stack_dir(tmp_path / "d", stack)
    with pytest.raises(FileNotFoundError):
        load_stack_dir(tmp_path / "d", channel_names=["DAPI", "Missing"])


def test_uint8_stack_supported(tmp_path):
    samples = np.arange(32, dtype=np.uint8).reshape(2, 4, 4)
    stack = ChannelStack(samples, ("a", "b"))
    save_stack_tiff(tmp_path / "s.tif", stack)
    back = load_stack_tiff(tmp_path / "s.tif")
    assert back.samples.dtype == np.uint8
    assert np.array_equal(back.samples, samples)
