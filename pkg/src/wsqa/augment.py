"""Copy-paste overlap augmentation: pick isolated, well-shaped, bright
nuclei, rotate and dim a copy, paste it partially over another nucleus, and
derive the whole/overlap/complement mask components the multi-head training
targets need.

Blending is additive with saturation at the sample dtype maximum (emission
physics: signals add), with the sampled opacity scaling the copied
intensities. Every tile gets a private RNG stream derived from the global
seed so runs are reproducible and schedule-independent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .filtering import mask_mean_intensity, nuclear_foreground_threshold
from .raster import (
    TAU_SOLID,
    AnnotationSet,
    ChannelStack,
    InstanceMask,
    bboxes_intersect,
    solidity,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentParams:
    t: int = 3  # paste attempts per copy nucleus
    max_overlap_ratio: float = 0.5
    opacity_range: tuple[float, float] = (0.5, 1.0)
    border_margin: int = 10
    isolation_radius: int = 5
    rng_seed: int = 17
    max_place_retries: int = 50
    max_area_drift: float = 0.15  # tolerated mask area change from resampling
    tau_solid: float = TAU_SOLID

    def __post_init__(self):
        if not (0.0 < self.max_overlap_ratio < 1.0):
            raise ValueError(f"max_overlap_ratio must be in (0,1), got {self.max_overlap_ratio}")
        lo, hi = self.opacity_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"opacity_range must satisfy 0 < lo <= hi <= 1, got {self.opacity_range}")
        if self.t < 1:
            raise ValueError("t must be >= 1")


@dataclass(frozen=True)
class TransformedPatch:
    """A rotated, opacity-scaled nucleus cut-out ready for pasting."""

    source_id: int
    mask: np.ndarray  # (h, w) bool
    channels: np.ndarray  # (C, h, w), same dtype as the tile, zero off-mask
    angle: float
    opacity: float

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class PasteRecord:
    tile_id: str
    copy_id: int
    paste_id: int
    new_id: int
    overlap_ratio: float
    angle: float
    opacity: float

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "copy_id": self.copy_id,
            "paste_id": self.paste_id,
            "new_id": self.new_id,
            "overlap_ratio": round(self.overlap_ratio, 6),
            "angle": round(self.angle, 3),
            "opacity": round(self.opacity, 4),
        }


def _isolated(mask: InstanceMask, aset: AnnotationSet, radius: int) -> bool:
    x, y, w, h = mask.bbox
    dilated = (x - radius, y - radius, w + 2 * radius, h + 2 * radius)
    return not any(
        m.id != mask.id and bboxes_intersect(dilated, m.bbox) for m in aset.instances
    )


def _clear_of_border(mask: InstanceMask, tile: ChannelStack, margin: int) -> bool:
    x, y, w, h = mask.bbox
    return (
        x >= margin
        and y >= margin
        and x + w <= tile.width - margin
        and y + h <= tile.height - margin
    )


def eligible_copy(
    tile: ChannelStack,
    aset: AnnotationSet,
    params: AugmentParams,
    threshold: float | None = None,
) -> list[InstanceMask]:
    """Nuclei passing all four copy/paste criteria: spatially isolated, away
    from the tile border, non-concave contour, and not dim."""
    if threshold is None:
        threshold = nuclear_foreground_threshold(tile, params.rng_seed)
    intensity = tile.nuclear_max()
    out = []
    for m in aset.instances:
        if not _isolated(m, aset, params.isolation_radius):
            continue
        if not _clear_of_border(m, tile, params.border_margin):
            continue
        if solidity(m) < params.tau_solid:
            continue
        if threshold is not None and mask_mean_intensity(m, intensity) <= threshold:
            continue
        out.append(m)
    return out


def eligible_paste(
    tile: ChannelStack,
    aset: AnnotationSet,
    params: AugmentParams,
    threshold: float | None = None,
) -> list[InstanceMask]:
    """Paste candidates are drawn from the same four criteria as copies."""
    return eligible_copy(tile, aset, params, threshold)


def _rotate_patch(mask_bits, channel_patch, angle):
    rot_mask = ndimage.rotate(
        mask_bits.astype(np.float32), angle, order=0, reshape=True, prefilter=False
    ) > 0.5
    rot_channels = ndimage.rotate(
        channel_patch.astype(np.float64),
        angle,
        axes=(1, 2),
        order=1,
        reshape=True,
        prefilter=False,
        cval=0.0,
    )
    return rot_mask, rot_channels


def transform(
    nucleus: InstanceMask,
    tile: ChannelStack,
    rng: np.random.Generator,
    params: AugmentParams = AugmentParams(),
) -> TransformedPatch:
    """Rotate the nucleus patch (nearest-neighbor mask, bilinear intensity)
    and scale intensities by a sampled opacity.

    Angles whose resampling changes the mask area by more than
    max_area_drift are resampled; 0 degrees is the final fallback.
    """
    x, y, w, h = nucleus.bbox
    mask_bits = nucleus.decode()
    patch = tile.samples[:, y : y + h, x : x + w]
    opacity = float(rng.uniform(*params.opacity_range))

    rot_mask = mask_bits
    rot_channels = patch.astype(np.float64)
    angle = 0.0
    for _ in range(10):
        cand = float(rng.uniform(0.0, 360.0))
        m, ch = _rotate_patch(mask_bits, patch, cand)
        if m.sum() >= 1 and abs(int(m.sum()) - nucleus.area) <= params.max_area_drift * nucleus.area:
            rot_mask, rot_channels, angle = m, ch, cand
            break

    # trim to the rotated mask extent and zero everything off-mask so the
    # paste can never touch pixels outside the mask
    ys, xs = np.nonzero(rot_mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    rot_mask = rot_mask[y0:y1, x0:x1]
    rot_channels = rot_channels[:, y0:y1, x0:x1]
    rot_channels = np.rint(rot_channels * opacity)
    rot_channels[:, ~rot_mask] = 0
    rot_channels = np.clip(rot_channels, 0, np.iinfo(tile.samples.dtype).max)
    return TransformedPatch(
        source_id=nucleus.id,
        mask=rot_mask,
        channels=rot_channels.astype(tile.samples.dtype),
        angle=angle,
        opacity=opacity,
    )


def _overlap_ratio(inter: int, a_area: int, b_area: int) -> float:
    return inter / min(a_area, b_area)


def _placed_overlap(placed_bits, px, py, target: InstanceMask) -> np.ndarray:
    """Intersection of a placed patch with a target mask, in the patch's
    local frame."""
    h, w = placed_bits.shape
    tx, ty, tw, th = target.bbox
    out = np.zeros_like(placed_bits)
    x0, y0 = max(px, tx), max(py, ty)
    x1, y1 = min(px + w, tx + tw), min(py + h, ty + th)
    if x1 > x0 and y1 > y0:
        out[y0 - py : y1 - py, x0 - px : x1 - px] = (
            placed_bits[y0 - py : y1 - py, x0 - px : x1 - px]
            & target.decode()[y0 - ty : y1 - ty, x0 - tx : x1 - tx]
        )
    return out


def copy_paste(
    patch: TransformedPatch,
    paste_target: InstanceMask,
    tile: ChannelStack,
    aset: AnnotationSet,
    params: AugmentParams,
    rng: np.random.Generator,
    forced_offset: tuple[int, int] | None = None,
) -> tuple[ChannelStack, AnnotationSet, PasteRecord | None]:
    """Blend the transformed patch over the paste target and update masks.

    Placement is rejection-sampled on a ring around the paste nucleus until
    the achieved overlap ratio (overlap / smaller area) lands in
    (0, max_overlap_ratio], the patch stays inside the tile, and the patch
    touches no instance other than the paste target. Returns the input
    unchanged (record None) when no placement is found.

    forced_offset pins the patch origin directly (test hook); the
    overlap > 0 requirement is waived for it.
    """
    ph, pw = patch.mask.shape
    tx, ty, tw, th = paste_target.bbox
    pcx, pcy = tx + tw / 2.0, ty + th / 2.0
    ring = (max(tw, th) + max(pw, ph)) / 2.0

    def try_place(px, py):
        if px < 0 or py < 0 or px + pw > tile.width or py + ph > tile.height:
            return None
        overlap = _placed_overlap(patch.mask, px, py, paste_target)
        inter = int(overlap.sum())
        ratio = _overlap_ratio(inter, patch.area, paste_target.area)
        if forced_offset is None and (inter == 0 or ratio > params.max_overlap_ratio):
            return None
        if forced_offset is not None and ratio > params.max_overlap_ratio:
            return None
        placed_bbox = (px, py, pw, ph)
        for other in aset.instances:
            if other.id == paste_target.id:
                continue
            if not bboxes_intersect(placed_bbox, other.bbox):
                continue
            if _placed_overlap(patch.mask, px, py, other).any():
                return None
        return overlap, inter, ratio

    found = None
    if forced_offset is not None:
        found = try_place(*forced_offset)
        if found is not None:
            px, py = forced_offset
    else:
        for _ in range(params.max_place_retries):
            d = rng.uniform(0.0, ring)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            px = int(round(pcx + d * np.cos(theta) - pw / 2.0))
            py = int(round(pcy + d * np.sin(theta) - ph / 2.0))
            found = try_place(px, py)
            if found is not None:
                break
    if found is None:
        log.info(
            "tile %s: no placement for copy %s onto %s after %d retries",
            aset.tile_id, patch.source_id, paste_target.id, params.max_place_retries,
        )
        return tile, aset, None

    overlap, inter, ratio = found

    samples = tile.samples.copy()
    region = samples[:, py : py + ph, px : px + pw].astype(np.int64)
    region += patch.channels.astype(np.int64)
    samples[:, py : py + ph, px : px + pw] = np.clip(
        region, 0, tile.dtype_max
    ).astype(samples.dtype)
    new_tile = ChannelStack(samples, tile.channel_names)

    new_id = aset.next_id()
    new_mask = InstanceMask.from_bitmask(new_id, patch.mask, origin=(px, py))
    bx, by = new_mask.bbox[0] - px, new_mask.bbox[1] - py  # 0 for trimmed patches
    new_mask = new_mask.with_components(
        overlap[by : by + new_mask.bbox[3], bx : bx + new_mask.bbox[2]]
    )

    target_overlap = _placed_overlap(
        np.ones((th, tw), dtype=bool), tx, ty, new_mask
    )
    prior = paste_target.decode_overlap()
    if prior is not None:
        target_overlap |= prior
    updated_target = paste_target.with_components(target_overlap)

    instances = [
        updated_target if m.id == paste_target.id else m for m in aset.instances
    ]
    instances.append(new_mask)
    new_set = aset.with_instances(tuple(instances), stage="augmented")
    record = PasteRecord(
        tile_id=aset.tile_id,
        copy_id=patch.source_id,
        paste_id=paste_target.id,
        new_id=new_id,
        overlap_ratio=ratio,
        angle=patch.angle,
        opacity=patch.opacity,
    )
    return new_tile, new_set, record


def run_algorithm2(
    tiles: list[tuple[ChannelStack, AnnotationSet]],
    params: AugmentParams = AugmentParams(),
) -> tuple[list[tuple[ChannelStack, AnnotationSet]], list[PasteRecord]]:
    """Per tile: each eligible copy nucleus is transformed and pasted onto
    sampled eligible paste targets, t attempts per copy.

    Deterministic for a fixed rng_seed: tile i uses an RNG seeded with
    rng_seed XOR i.
    """
    out = []
    records: list[PasteRecord] = []
    for idx, (tile, aset) in enumerate(tiles):
        rng = np.random.default_rng(np.uint64(params.rng_seed) ^ np.uint64(idx))
        threshold = nuclear_foreground_threshold(tile, params.rng_seed)
        copies = eligible_copy(tile, aset, params, threshold)
        pastes = eligible_paste(tile, aset, params, threshold)
        cur_tile, cur_set = tile, aset
        if not copies or not pastes:
            out.append((cur_tile, cur_set.with_instances(cur_set.instances, stage="augmented")))
            continue
        paste_ids = [m.id for m in pastes]
        for copy_mask in copies:
            patch = transform(copy_mask, cur_tile, rng, params)
            for _ in range(params.t):
                choices = [pid for pid in paste_ids if pid != copy_mask.id]
                if not choices:
                    break
                pid = int(rng.choice(choices))
                target = next(m for m in cur_set.instances if m.id == pid)
                cur_tile, cur_set, rec = copy_paste(
                    patch, target, cur_tile, cur_set, params, rng
                )
                if rec is not None:
                    records.append(rec)
        out.append((cur_tile, cur_set.with_instances(cur_set.instances, stage="augmented")))
    return out, records
