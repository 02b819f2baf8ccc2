"""Channel-stack file I/O.

Two layouts are supported:
  * one multi-page grayscale TIFF, one page per channel (8- or 16-bit);
    the ordered channel-name list is stored as JSON in the first page's
    ImageDescription tag, so stacks round-trip without sidecar files
  * a directory of per-channel PNG or TIFF files named by channel
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import ChannelStack

_IMAGE_DESCRIPTION = 270
_RASTER_SUFFIXES = (".png", ".tif", ".tiff")


def save_stack_tiff(path, stack: ChannelStack) -> None:
    pages = [Image.fromarray(stack.samples[c]) for c in range(stack.channels)]
    meta = json.dumps({"channels": list(stack.channel_names)})
    pages[0].save(
        str(path),
        save_all=True,
        append_images=pages[1:],
        tiffinfo={_IMAGE_DESCRIPTION: meta},
    )


def load_stack_tiff(path, channel_names=None) -> ChannelStack:
    img = Image.open(str(path))
    frames = []
    for i in range(getattr(img, "n_frames", 1)):
        img.seek(i)
        arr = np.asarray(img)
        if arr.ndim != 2:
            raise ValueError(f"{path}: page {i} is not grayscale")
        frames.append(arr)
    names = channel_names
    if names is None:
        img.seek(0)
        desc = img.tag_v2.get(_IMAGE_DESCRIPTION) if hasattr(img, "tag_v2") else None
        if desc:
            try:
                names = json.loads(desc).get("channels")
            except (json.JSONDecodeError, AttributeError):
                names = None
    if names is None:
        names = [f"ch{i:02d}" for i in range(len(frames))]
    if len(names) != len(frames):
        raise ValueError(f"{path}: {len(names)} channel names for {len(frames)} pages")
    dtype = np.uint16 if any(f.dtype == np.uint16 for f in frames) else np.uint8
    return ChannelStack(np.stack(frames).astype(dtype), tuple(names))


def save_stack_dir(directory, stack: ChannelStack, fmt: str = "png") -> None:
    """One <channel>.<fmt> file per channel inside directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c, name in enumerate(stack.channel_names):
        Image.fromarray(stack.samples[c]).save(str(d / f"{name}.{fmt}"))


def load_stack_dir(directory, channel_names=None) -> ChannelStack:
    d = Path(directory)
    files = {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in _RASTER_SUFFIXES}
    if not files:
        raise FileNotFoundError(f"no raster files in {d}")
    names = list(channel_names) if channel_names else sorted(files)
    missing = [n for n in names if n not in files]
    if missing:
        raise FileNotFoundError(f"missing channel files in {d}: {missing}")
    frames = [np.asarray(Image.open(str(files[n]))) for n in names]
    return ChannelStack(np.stack(frames), tuple(names))


def load_stack(path, channel_names=None) -> ChannelStack:
    """Dispatch on path type: TIFF file or per-channel directory."""
    p = Path(path)
    if p.is_dir():
        return load_stack_dir(p, channel_names)
    if p.suffix.lower() in (".tif", ".tiff"):
        return load_stack_tiff(p, channel_names)
    raise ValueError(f"unsupported raster input {p}")
