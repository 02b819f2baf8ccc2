"""Dice a slide into overlapping tiles and merge per-tile masks back into
slide coordinates with duplicate resolution.

Edge policy: the last tile of each row/column is clamped flush to the slide
edge (coverage may repeat; no pixels are synthesized). Slides smaller than
the tile size yield a single tile clamped to the slide bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import (
    AnnotationSet,
    ChannelStack,
    InstanceMask,
    bboxes_intersect,
    iou,
)


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class TileIndex:
    tile_id: str
    origin: tuple[int, int]
    size: int
    overlap: int
    row: int
    col: int
    extent: tuple[int, int]  # actual (w, h), smaller than size only on tiny slides

    @property
    def stride(self) -> int:
        return self.size - self.overlap

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "origin": list(self.origin),
            "size": self.size,
            "overlap": self.overlap,
            "row": self.row,
            "col": self.col,
            "extent": list(self.extent),
        }

    @staticmethod
    def from_dict(d: dict) -> "TileIndex":
        return TileIndex(
            tile_id=d["tile_id"],
            origin=tuple(int(v) for v in d["origin"]),
            size=int(d["size"]),
            overlap=int(d["overlap"]),
            row=int(d["row"]),
            col=int(d["col"]),
            extent=tuple(int(v) for v in d["extent"]),
        )


def tile_name(row: int, col: int) -> str:
    return f"tile_{row:04d}_{col:04d}"


def _axis_origins(length: int, tile_size: int, stride: int) -> list[int]:
    if length <= tile_size:
        return [0]
    origins = list(range(0, length - tile_size, stride))
    origins.append(length - tile_size)  # flush clamp
    return origins


def dice_indices(
    width: int, height: int, tile_size: int = 512, overlap: int = 50
) -> list[TileIndex]:
    """Tile geometry only, row-major by origin."""
    if width < 1 or height < 1:
        raise TilingError("empty slide")
    if overlap < 0 or tile_size <= overlap:
        raise TilingError(f"need tile_size > overlap >= 0, got {tile_size}, {overlap}")
    stride = tile_size - overlap
    xs = _axis_origins(width, tile_size, stride)
    ys = _axis_origins(height, tile_size, stride)
    out = []
    for r, y in enumerate(ys):
        for c, x in enumerate(xs):
            w = min(tile_size, width - x)
            h = min(tile_size, height - y)
            out.append(
                TileIndex(
                    tile_id=tile_name(r, c),
                    origin=(x, y),
                    size=tile_size,
                    overlap=overlap,
                    row=r,
                    col=c,
                    extent=(w, h),
                )
            )
    return out


def dice(
    slide: ChannelStack, tile_size: int = 512, overlap: int = 50
) -> list[tuple[TileIndex, ChannelStack]]:
    """Cut the slide into overlapping tiles covering every pixel."""
    indices = dice_indices(slide.width, slide.height, tile_size, overlap)
    return [
        (ti, slide.crop(ti.origin[0], ti.origin[1], ti.extent[0], ti.extent[1]))
        for ti in indices
    ]


def dice_annotations(
    aset: AnnotationSet, indices: list[TileIndex]
) -> dict[str, AnnotationSet]:
    """Split a slide-frame annotation set into per-tile sets.

    Every instance is clipped to each tile it intersects, mimicking what a
    per-tile annotator would produce (boundary-truncated duplicates in the
    overlap bands; merge resolves them).
    """
    per_tile: dict[str, AnnotationSet] = {}
    for ti in indices:
        ox, oy = ti.origin
        tw, th = ti.extent
        clipped = []
        next_id = 1
        for m in aset.instances:
            if not bboxes_intersect(m.bbox, (ox, oy, tw, th)):
                continue
            frame = np.zeros((th, tw), dtype=bool)
            x, y, w, h = m.bbox
            x0, y0 = max(x, ox), max(y, oy)
            x1, y1 = min(x + w, ox + tw), min(y + h, oy + th)
            sub = m.decode()[y0 - y : y1 - y, x0 - x : x1 - x]
            if not sub.any():
                continue
            frame[y0 - oy : y1 - oy, x0 - ox : x1 - ox] = sub
            clipped.append(InstanceMask.from_bitmask(next_id, frame, score=m.score))
            next_id += 1
        per_tile[ti.tile_id] = AnnotationSet(ti.tile_id, tuple(clipped), aset.stage)
    return per_tile


def _is_suspect(mask: InstanceMask, ti: TileIndex, slide_w: int, slide_h: int) -> bool:
    """True when the mask touches a tile edge that is interior to the slide,
    i.e. the mask is probably truncated by the tile boundary."""
    x, y, w, h = mask.bbox
    ox, oy = ti.origin
    tw, th = ti.extent
    if x == 0 and ox > 0:
        return True
    if y == 0 and oy > 0:
        return True
    if x + w == tw and ox + tw < slide_w:
        return True
    if y + h == th and oy + th < slide_h:
        return True
    return False


def merge(
    per_tile: list[tuple[TileIndex, AnnotationSet]],
    dedup_iou: float = 0.5,
) -> AnnotationSet:
    """Merge per-tile annotation sets into one slide-frame set.

    Masks are translated by their tile origin; conflicting pairs
    (IoU > dedup_iou) are resolved keeping the larger mask, with
    tile-boundary-truncated (suspect) masks losing regardless of area and
    ties broken by lower tile id. The output contains no conflicting pair.
    """
    if not per_tile:
        return AnnotationSet("slide", (), "raw")
    sizes = {(ti.size, ti.overlap) for ti, _ in per_tile}
    if len(sizes) > 1:
        raise TilingError(f"inconsistent tile geometry: {sorted(sizes)}")
    slide_w = max(ti.origin[0] + ti.extent[0] for ti, _ in per_tile)
    slide_h = max(ti.origin[1] + ti.extent[1] for ti, _ in per_tile)

    candidates = []  # (suspect, -area, tile_id, instance_id, mask)
    stage = per_tile[0][1].stage
    for ti, aset in per_tile:
        for m in aset.instances:
            suspect = _is_suspect(m, ti, slide_w, slide_h)
            candidates.append(
                (suspect, -m.area, ti.tile_id, m.id, m.translated(*ti.origin))
            )
    candidates.sort(key=lambda t: t[:4])

    # spatial grid over bboxes so conflict checks stay near-linear
    cell = max(per_tile[0][0].size, 1)
    grid: dict[tuple[int, int], list[InstanceMask]] = {}

    def cells_of(bbox):
        x, y, w, h = bbox
        for cy in range(y // cell, (y + h - 1) // cell + 1):
            for cx in range(x // cell, (x + w - 1) // cell + 1):
                yield (cy, cx)

    kept: list[InstanceMask] = []
    for _suspect, _na, _tid, _mid, mask in candidates:
        conflict = False
        seen = set()
        for key in cells_of(mask.bbox):
            for other in grid.get(key, ()):
                if id(other) in seen:
                    continue
                seen.add(id(other))
                if bboxes_intersect(mask.bbox, other.bbox) and iou(mask, other) > dedup_iou:
                    conflict = True
                    break
            if conflict:
                break
        if conflict:
            continue
        kept.append(mask)
        for key in cells_of(mask.bbox):
            grid.setdefault(key, []).append(mask)

    relabeled = tuple(m.with_id(i + 1) for i, m in enumerate(kept))
    return AnnotationSet("slide", relabeled, stage)
