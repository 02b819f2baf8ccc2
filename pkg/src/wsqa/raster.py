"""Core raster and mask types: channel stacks, RLE instance masks, and the
geometric predicates (IoU, containment, solidity) shared by the whole toolkit.

Masks are stored run-length encoded within their bounding box, row-major,
counts alternating background/foreground starting with background. Keeping
the encoding bbox-local makes translation (tiling, copy-paste) an O(1)
bbox update.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _kernels

DAPI = "DAPI"
PANHISTONE = "PanHistone"
NUCLEAR_CHANNELS = (DAPI, PANHISTONE)

#: default convex-hull solidity threshold separating non-concave from
#: concave mask contours
TAU_SOLID = 0.92

STAGES = ("raw", "filtered", "augmented")

Bbox = tuple[int, int, int, int]  # x, y, w, h


class MaskError(ValueError):
    """Invalid mask construction or undefined geometric ratio."""


# ---------------------------------------------------------------------------
# ChannelStack
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelStack:
    """A C-channel intensity raster with named channels.

    samples has shape (C, H, W), channel-major, unsigned integer dtype
    (8- or 16-bit). All channels share the same height and width.
    """

    samples: np.ndarray
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if self.samples.ndim != 3:
            raise ValueError(f"samples must be (C, H, W), got shape {self.samples.shape}")
        if self.samples.dtype not in (np.dtype(np.uint8), np.dtype(np.uint16)):
            raise ValueError(f"samples must be uint8 or uint16, got {self.samples.dtype}")
        names = tuple(self.channel_names)
        object.__setattr__(self, "channel_names", names)
        if len(names) != self.samples.shape[0]:
            raise ValueError(
                f"{len(names)} channel names for {self.samples.shape[0]} channels"
            )
        if len(set(names)) != len(names):
            raise ValueError(f"channel names not unique: {names}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def height(self) -> int:
        return self.samples.shape[1]

    @property
    def width(self) -> int:
        return self.samples.shape[2]

    @property
    def dtype_max(self) -> int:
        return int(np.iinfo(self.samples.dtype).max)

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.samples[self.channel_names.index(name)]
        except ValueError:
            raise KeyError(f"no channel named {name!r} in {self.channel_names}") from None

    def has_nuclear_channels(self) -> bool:
        return all(n in self.channel_names for n in NUCLEAR_CHANNELS)

    def nuclear_max(self) -> np.ndarray:
        """Per-pixel max of the DAPI and PanHistone channels."""
        if not self.has_nuclear_channels():
            raise KeyError(
                f"nuclear channels {NUCLEAR_CHANNELS} required, have {self.channel_names}"
            )
        return np.maximum(self.channel(DAPI), self.channel(PANHISTONE))

    def crop(self, x: int, y: int, w: int, h: int) -> "ChannelStack":
        if x < 0 or y < 0 or x + w > self.width or y + h > self.height:
            raise ValueError(f"crop ({x},{y},{w},{h}) outside {self.width}x{self.height}")
        return ChannelStack(self.samples[:, y : y + h, x : x + w].copy(), self.channel_names)


# ---------------------------------------------------------------------------
# RLE helpers
# ---------------------------------------------------------------------------


def rle_encode(bitmask: np.ndarray) -> tuple[int, ...]:
    """Encode a binary grid as row-major run-length counts.

    Counts alternate background/foreground and always start with a
    background run (possibly zero-length). Round-trips bit-exactly through
    rle_decode.
    """
    if bitmask.size == 0:
        raise MaskError("cannot encode an empty grid")
    flat = np.ascontiguousarray(bitmask.reshape(-1) != 0, dtype=np.uint8)
    return tuple(int(c) for c in _kernels.rle_encode(flat))


def rle_decode(counts, h: int, w: int) -> np.ndarray:
    """Decode run-length counts back into an (h, w) boolean grid."""
    arr = np.asarray(counts, dtype=np.int64)
    flat = _kernels.rle_decode(arr, h * w)
    return flat.reshape(h, w).astype(bool)


def rle_foreground_total(counts) -> int:
    return int(sum(counts[1::2]))


# ---------------------------------------------------------------------------
# InstanceMask
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceMask:
    """One instance mask: bbox plus bbox-local RLE.

    overlap_rle / complement_rle, when both present, partition the mask into
    the part shared with another instance and the rest; the constructor
    enforces the partition exactly.
    """

    id: int
    bbox: Bbox
    rle: tuple[int, ...]
    area: int
    score: float | None = None
    overlap_rle: tuple[int, ...] | None = None
    complement_rle: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        object.__setattr__(self, "rle", tuple(int(c) for c in self.rle))
        if self.overlap_rle is not None:
            object.__setattr__(self, "overlap_rle", tuple(int(c) for c in self.overlap_rle))
        if self.complement_rle is not None:
            object.__setattr__(
                self, "complement_rle", tuple(int(c) for c in self.complement_rle)
            )
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise MaskError(f"mask {self.id}: degenerate bbox {self.bbox}")
        if sum(self.rle) != w * h:
            raise MaskError(
                f"mask {self.id}: rle sums to {sum(self.rle)}, bbox holds {w * h}"
            )
        if any(c < 0 for c in self.rle):
            raise MaskError(f"mask {self.id}: negative run count")
        fg = rle_foreground_total(self.rle)
        if fg != self.area:
            raise MaskError(f"mask {self.id}: area {self.area} != foreground total {fg}")
        if self.area < 1:
            raise MaskError(f"mask {self.id}: empty mask")
        if (self.overlap_rle is None) != (self.complement_rle is None):
            raise MaskError(f"mask {self.id}: overlap/complement must come as a pair")
        if self.overlap_rle is not None:
            if sum(self.overlap_rle) != w * h or sum(self.complement_rle) != w * h:
                raise MaskError(f"mask {self.id}: component rle does not fill bbox")
            whole = self.decode()
            ov = rle_decode(self.overlap_rle, h, w)
            co = rle_decode(self.complement_rle, h, w)
            if np.any(ov & co):
                raise MaskError(f"mask {self.id}: overlap and complement intersect")
            if not np.array_equal(ov | co, whole):
                raise MaskError(f"mask {self.id}: components do not union to the mask")

    @cached_property
    def _local(self) -> np.ndarray:
        x, y, w, h = self.bbox
        bits = rle_decode(self.rle, h, w)
        bits.flags.writeable = False
        return bits

    def decode(self) -> np.ndarray:
        """Bbox-local boolean grid (read-only view; copy before mutating)."""
        return self._local

    def decode_overlap(self) -> np.ndarray | None:
        if self.overlap_rle is None:
            return None
        x, y, w, h = self.bbox
        return rle_decode(self.overlap_rle, h, w)

    def decode_complement(self) -> np.ndarray | None:
        if self.complement_rle is None:
            return None
        x, y, w, h = self.bbox
        return rle_decode(self.complement_rle, h, w)

    def to_frame(self, width: int, height: int) -> np.ndarray:
        """Paint the mask into a full (height, width) boolean frame."""
        x, y, w, h = self.bbox
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise MaskError(f"mask {self.id}: bbox {self.bbox} outside {width}x{height}")
        frame = np.zeros((height, width), dtype=bool)
        frame[y : y + h, x : x + w] = self.decode()
        return frame

    def translated(self, dx: int, dy: int) -> "InstanceMask":
        x, y, w, h = self.bbox
        return replace(self, bbox=(x + dx, y + dy, w, h))

    def with_id(self, new_id: int) -> "InstanceMask":
        return replace(self, id=new_id)

    @staticmethod
    def from_bitmask(
        mask_id: int,
        bits: np.ndarray,
        origin: tuple[int, int] = (0, 0),
        score: float | None = None,
    ) -> "InstanceMask":
        """Build a mask from a boolean grid; bbox is the tight extent of the
        foreground, offset by origin."""
        ys, xs = np.nonzero(bits)
        if ys.size == 0:
            raise MaskError(f"mask {mask_id}: bitmask has no foreground")
        x0, x1 = int(xs.min()), int(xs.max()) + 1
        y0, y1 = int(ys.min()), int(ys.max()) + 1
        local = bits[y0:y1, x0:x1] != 0
        return InstanceMask(
            id=mask_id,
            bbox=(origin[0] + x0, origin[1] + y0, x1 - x0, y1 - y0),
            rle=rle_encode(local),
            area=int(local.sum()),
            score=score,
        )

    def with_components(
        self, overlap_bits: np.ndarray | None
    ) -> "InstanceMask":
        """Attach overlap/complement components from a bbox-local overlap grid.

        overlap_bits must be a subset of the mask (same shape as the bbox);
        the complement is derived. None clears both components.
        """
        if overlap_bits is None:
            return replace(self, overlap_rle=None, complement_rle=None)
        whole = self.decode()
        if overlap_bits.shape != whole.shape:
            raise MaskError(f"mask {self.id}: overlap grid shape mismatch")
        ov = overlap_bits & whole
        co = whole & ~ov
        return replace(self, overlap_rle=rle_encode(ov), complement_rle=rle_encode(co))


# ---------------------------------------------------------------------------
# AnnotationSet
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationSet:
    """The per-tile instance collection at one curation stage."""

    tile_id: str
    instances: tuple[InstanceMask, ...]
    stage: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        ids = [m.id for m in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate instance ids in tile {self.tile_id}")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def with_instances(self, instances, stage: str | None = None) -> "AnnotationSet":
        return AnnotationSet(self.tile_id, tuple(instances), stage or self.stage)

    def next_id(self) -> int:
        return max((m.id for m in self.instances), default=0) + 1

    def union_frame(self, width: int, height: int) -> np.ndarray:
        """Boolean frame covered by any instance."""
        frame = np.zeros((height, width), dtype=bool)
        for m in self.instances:
            x, y, w, h = m.bbox
            frame[y : y + h, x : x + w] |= m.decode()
        return frame


# ---------------------------------------------------------------------------
# Geometric predicates
# ---------------------------------------------------------------------------


def _bbox_intersection(a: Bbox, b: Bbox) -> Bbox | None:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    x0 = max(ax, bx)
    y0 = max(ay, by)
    x1 = min(ax + aw, bx + bw)
    y1 = min(ay + ah, by + bh)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def bboxes_intersect(a: Bbox, b: Bbox, margin: int = 0) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return not (
        ax + aw + margin <= bx
        or bx + bw + margin <= ax
        or ay + ah + margin <= by
        or by + bh + margin <= ay
    )


def intersection_area(a: InstanceMask, b: InstanceMask) -> int:
    """Pixel count of a ∩ b, both in the same coordinate frame."""
    box = _bbox_intersection(a.bbox, b.bbox)
    if box is None:
        return 0
    x0, y0, w, h = box
    ax, ay = a.bbox[0], a.bbox[1]
    bx, by = b.bbox[0], b.bbox[1]
    sub_a = a.decode()[y0 - ay : y0 - ay + h, x0 - ax : x0 - ax + w]
    sub_b = b.decode()[y0 - by : y0 - by + h, x0 - bx : x0 - bx + w]
    return _kernels.intersect_count(
        np.ascontiguousarray(sub_a, dtype=np.uint8),
        np.ascontiguousarray(sub_b, dtype=np.uint8),
    )


def iou(a: InstanceMask, b: InstanceMask) -> float:
    """Intersection over union of two masks in the same frame."""
    if a.area == 0 and b.area == 0:
        raise MaskError("iou undefined for two empty masks")
    inter = intersection_area(a, b)
    return inter / (a.area + b.area - inter)


def containment(a: InstanceMask, b: InstanceMask) -> float:
    """|a ∩ b| / |b|: how much of b lies inside a."""
    if b.area == 0:
        raise MaskError("containment undefined for empty reference mask")
    return intersection_area(a, b) / b.area


def boundary_pixels(bits: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background (or the grid edge)."""
    padded = np.pad(bits, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return bits & ~interior


def solidity(mask: InstanceMask) -> float:
    """Mask area / convex-hull area, clamped to (0, 1].

    The hull is taken over boundary pixel centers and its area is the raw
    hull-polygon area (no half-pixel dilation), which makes convex rasters
    come out slightly above 1 before the clamp. Degenerate (collinear)
    masks return 1.0 by convention.
    """
    bits = mask.decode()
    border = boundary_pixels(bits)
    ys, xs = np.nonzero(border)
    if ys.size < 3:
        return 1.0
    pts = np.column_stack((xs, ys)).astype(np.float64)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return 1.0  # collinear boundary
    hull_area = float(hull.volume)
    if hull_area <= 0.0:
        return 1.0
    return min(1.0, mask.area / hull_area)


def is_nonconcave(mask: InstanceMask, tau_solid: float = TAU_SOLID) -> bool:
    """Concavity surrogate: contour accepted as non-concave when its
    convex-hull solidity reaches tau_solid."""
    return solidity(mask) >= tau_solid


# ---------------------------------------------------------------------------
# Mask-exchange JSON
# ---------------------------------------------------------------------------


def _rle_obj(counts) -> dict:
    return {"order": "row-major", "counts": list(counts)}


def _rle_from_obj(obj) -> tuple[int, ...]:
    if obj.get("order") != "row-major":
        raise ValueError(f"unsupported rle order {obj.get('order')!r}")
    return tuple(int(c) for c in obj["counts"])


def annotation_to_dict(aset: AnnotationSet, width: int, height: int) -> dict:
    instances = []
    for m in aset.instances:
        rec = {
            "id": m.id,
            "bbox": list(m.bbox),
            "area": m.area,
            "rle": _rle_obj(m.rle),
        }
        if m.score is not None:
            rec["score"] = m.score
        if m.overlap_rle is not None:
            rec["overlap_rle"] = _rle_obj(m.overlap_rle)
            rec["complement_rle"] = _rle_obj(m.complement_rle)
        instances.append(rec)
    return {
        "tile_id": aset.tile_id,
        "width": width,
        "height": height,
        "stage": aset.stage,
        "instances": instances,
    }


def annotation_from_dict(doc: dict) -> tuple[AnnotationSet, int, int]:
    instances = []
    for rec in doc["instances"]:
        instances.append(
            InstanceMask(
                id=int(rec["id"]),
                bbox=tuple(int(v) for v in rec["bbox"]),
                rle=_rle_from_obj(rec["rle"]),
                area=int(rec["area"]),
                score=rec.get("score"),
                overlap_rle=_rle_from_obj(rec["overlap_rle"]) if "overlap_rle" in rec else None,
                complement_rle=(
                    _rle_from_obj(rec["complement_rle"]) if "complement_rle" in rec else None
                ),
            )
        )
    aset = AnnotationSet(doc["tile_id"], tuple(instances), doc["stage"])
    return aset, int(doc["width"]), int(doc["height"])


def dump_json(doc: dict, path) -> None:
    """Canonical JSON serialization: sorted keys, fixed separators, so that
    equal content is byte-identical across runs."""
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def save_annotation(path, aset: AnnotationSet, width: int, height: int) -> None:
    dump_json(annotation_to_dict(aset, width, height), path)


def load_annotation(path) -> tuple[AnnotationSet, int, int]:
    return annotation_from_dict(json.loads(Path(path).read_text()))
