"""Seeded synthetic slide generator: convex nuclei on a noisy background
with nuclear and cell-type marker channels, plus a weak-teacher annotation
set seeded with the three error types the filter rules target (union masks,
duplicate masks, dim nuclei) and perturbed pseudo/student sets for the
generalization diagnostics. All geometry is deterministic in the seed.

Layout guarantees the fixtures rely on: nuclei sit on a jittered grid so
they stay spatially isolated; marker haze blobs (the mid-intensity cluster
that marker thresholding must reject) sit on grid corners, never touching
a nucleus; union-pair members are small enough to stay disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import DAPI, PANHISTONE, AnnotationSet, ChannelStack, InstanceMask

DEFAULT_MARKERS = ("NeuN", "Iba1", "Olig2", "S100b", "GFP")

BG_LEVEL = 1000
HAZE_LEVEL = 5000
SIGNAL_LO, SIGNAL_HI = 35000, 55000
DIM_LO, DIM_HI = 1250, 1400


@dataclass(frozen=True)
class SynthParams:
    width: int = 1024
    height: int = 1024
    n_nuclei: int = 60
    seed: int = 0
    marker_names: tuple[str, ...] = DEFAULT_MARKERS
    union_fraction: float = 0.1  # of placement cells, turned into A/B pairs + union mask
    duplicate_fraction: float = 0.1
    dim_fraction: float = 0.1
    mixed_fraction: float = 0.15  # nuclei with a 50/50 two-marker signature
    unmarked_fraction: float = 0.05  # nuclei with no marker signal at all
    pseudo_error_rate: float = 0.2
    student_error_rate: float = 0.0
    cell: int = 52  # placement grid pitch; keeps nuclei isolated
    margin: int = 24


@dataclass
class SynthResult:
    slide: ChannelStack
    gt: AnnotationSet
    teacher: AnnotationSet
    pseudo: AnnotationSet
    student: AnnotationSet
    planted: dict[str, list[int]] = field(default_factory=dict)
    nucleus_types: dict[int, tuple[str, ...]] = field(default_factory=dict)


def _ellipse_bits(rng, r_lo: float = 6.0, r_hi: float = 13.0) -> np.ndarray:
    """Rotated-ellipse bits in a tight local window (odd square)."""
    ry = float(rng.uniform(r_lo, r_hi))
    rx = float(rng.uniform(r_lo, r_hi))
    theta = float(rng.uniform(0, np.pi))
    r = int(np.ceil(max(rx, ry))) + 1
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _paint(channel: np.ndarray, bits: np.ndarray, cy: int, cx: int, rng, lo, hi):
    """Paint local bits centered at (cy, cx) with noisy intensity."""
    r = bits.shape[0] // 2
    region = channel[cy - r : cy + r + 1, cx - r : cx + r + 1]
    base = rng.uniform(lo, hi)
    region[bits] = np.clip(
        base + rng.normal(0.0, 0.03 * base, size=int(bits.sum())), 0, 65535
    )


def _mask_from_local(mask_id: int, bits: np.ndarray, cy: int, cx: int) -> InstanceMask:
    r = bits.shape[0] // 2
    return InstanceMask.from_bitmask(mask_id, bits, origin=(cx - r, cy - r))


def _shifted(mask: InstanceMask, dx: int, dy: int, width: int, height: int) -> InstanceMask:
    x, y, w, h = mask.bbox
    nx = min(max(x + dx, 0), width - w)
    ny = min(max(y + dy, 0), height - h)
    return mask.translated(nx - x, ny - y)


def generate(params: SynthParams = SynthParams()) -> SynthResult:
    rng = np.random.default_rng(params.seed)
    W, H = params.width, params.height

    cells = [
        (y, x)
        for y in range(params.margin, H - params.margin - params.cell, params.cell)
        for x in range(params.margin, W - params.margin - params.cell, params.cell)
    ]
    rng.shuffle(cells)
    n_cells = min(params.n_nuclei, len(cells))
    n_union = int(round(params.union_fraction * n_cells))
    n_dup = int(round(params.duplicate_fraction * n_cells))
    n_dim = int(round(params.dim_fraction * n_cells))

    channel_names = (DAPI, PANHISTONE, *params.marker_names)
    stacks = {
        name: rng.uniform(BG_LEVEL * 0.8, BG_LEVEL * 1.2, size=(H, W))
        for name in channel_names
    }

    # haze blobs on the grid corners: guaranteed per-tile mid cluster that
    # never touches a nucleus
    for name in params.marker_names:
        for gy in range(params.margin, H - 10, params.cell):
            for gx in range(params.margin, W - 10, params.cell):
                if rng.random() > 0.5:
                    continue
                r = int(rng.integers(3, 8))
                y0, y1 = max(0, gy - r), min(H, gy + r + 1)
                x0, x1 = max(0, gx - r), min(W, gx + r + 1)
                yy, xx = np.mgrid[y0:y1, x0:x1]
                blob = (yy - gy) ** 2 + (xx - gx) ** 2 <= r * r
                region = stacks[name][y0:y1, x0:x1]
                region[blob] = rng.uniform(HAZE_LEVEL * 0.9, HAZE_LEVEL * 1.1)

    gt_masks: list[InstanceMask] = []
    teacher_masks: list[InstanceMask] = []
    planted: dict[str, list[int]] = {"union": [], "duplicate": [], "dim": []}
    nucleus_types: dict[int, tuple[str, ...]] = {}
    next_gt = 1
    next_teacher = 1

    def nucleus_at(cy, cx, dim=False, r_hi=13.0):
        nonlocal next_gt, next_teacher
        bits = _ellipse_bits(rng, 6.0, r_hi)
        lo, hi = (DIM_LO, DIM_HI) if dim else (SIGNAL_LO, SIGNAL_HI)
        _paint(stacks[DAPI], bits, cy, cx, rng, lo, hi)
        _paint(stacks[PANHISTONE], bits, cy, cx, rng, lo, hi)
        gm = _mask_from_local(next_gt, bits, cy, cx)
        tm = _mask_from_local(next_teacher, bits, cy, cx)
        gt_masks.append(gm)
        teacher_masks.append(tm)
        next_gt += 1
        next_teacher += 1

        u = rng.random()
        if dim or u < params.unmarked_fraction:
            types: tuple[str, ...] = ()
        elif u < params.unmarked_fraction + params.mixed_fraction:
            pair = rng.choice(len(params.marker_names), size=2, replace=False)
            types = (params.marker_names[pair[0]], params.marker_names[pair[1]])
            r = bits.shape[0] // 2
            local_x = np.arange(bits.shape[1])[None, :]
            left = bits & (local_x < r)
            right = bits & (local_x >= r)
            if left.any():
                _paint(stacks[types[0]], left, cy, cx, rng, SIGNAL_LO, SIGNAL_HI)
            if right.any():
                _paint(stacks[types[1]], right, cy, cx, rng, SIGNAL_LO, SIGNAL_HI)
        else:
            types = (params.marker_names[int(rng.integers(len(params.marker_names)))],)
            _paint(stacks[types[0]], bits, cy, cx, rng, SIGNAL_LO, SIGNAL_HI)
        nucleus_types[gm.id] = types
        return gm, tm, bits

    cell_idx = 0

    def next_center():
        nonlocal cell_idx
        y, x = cells[cell_idx]
        cell_idx += 1
        jitter = params.cell // 2 - 18
        cy = y + params.cell // 2
        cx = x + params.cell // 2
        if jitter > 0:
            cy += int(rng.integers(-jitter, jitter + 1))
            cx += int(rng.integers(-jitter, jitter + 1))
        return cy, cx

    # planted union pairs: two small nuclei side by side plus their union
    # mask; radii <= 8 with 18 px center gap keeps the pair disjoint
    for _ in range(n_union):
        if cell_idx >= n_cells:
            break
        cy, cx = next_center()
        ga, _, bits_a = nucleus_at(cy, cx - 9, r_hi=8.0)
        gb, _, bits_b = nucleus_at(cy, cx + 9, r_hi=8.0)
        ox = min(ga.bbox[0], gb.bbox[0])
        oy = min(ga.bbox[1], gb.bbox[1])
        ex = max(ga.bbox[0] + ga.bbox[2], gb.bbox[0] + gb.bbox[2]) - ox
        ey = max(ga.bbox[1] + ga.bbox[3], gb.bbox[1] + gb.bbox[3]) - oy
        acc = np.zeros((ey, ex), dtype=bool)
        for gm in (ga, gb):
            x, y, w, h = gm.bbox
            acc[y - oy : y - oy + h, x - ox : x - ox + w] |= gm.decode()
        um = InstanceMask.from_bitmask(next_teacher, acc, origin=(ox, oy))
        teacher_masks.append(um)
        planted["union"].append(um.id)
        next_teacher += 1

    # planted duplicates: eroded copy of a normal nucleus
    for _ in range(n_dup):
        if cell_idx >= n_cells:
            break
        cy, cx = next_center()
        _, _, bits = nucleus_at(cy, cx)
        eroded = ndimage.binary_erosion(bits, iterations=3)
        if eroded.sum() >= 3:
            dm = _mask_from_local(next_teacher, eroded, cy, cx)
            teacher_masks.append(dm)
            planted["duplicate"].append(dm.id)
            next_teacher += 1

    # planted dim nuclei: real but too faint to train on
    for _ in range(n_dim):
        if cell_idx >= n_cells:
            break
        cy, cx = next_center()
        _, tm, _ = nucleus_at(cy, cx, dim=True)
        planted["dim"].append(tm.id)

    while cell_idx < n_cells:
        cy, cx = next_center()
        nucleus_at(cy, cx)

    samples = np.empty((len(channel_names), H, W), dtype=np.uint16)
    for i, name in enumerate(channel_names):
        samples[i] = np.clip(stacks.pop(name), 0, 65535).astype(np.uint16)
    slide = ChannelStack(samples, channel_names)

    gt = AnnotationSet("slide", tuple(gt_masks), "raw")
    teacher = AnnotationSet("slide", tuple(teacher_masks), "raw")

    def corrupted(error_rate: float) -> AnnotationSet:
        masks = []
        for m in gt_masks:
            if rng.random() < error_rate:
                masks.append(_shifted(m, 9, 0, W, H))
            else:
                masks.append(m)
        return AnnotationSet("slide", tuple(masks), "raw")

    pseudo = corrupted(params.pseudo_error_rate)
    student = corrupted(params.student_error_rate)
    return SynthResult(
        slide=slide,
        gt=gt,
        teacher=teacher,
        pseudo=pseudo,
        student=student,
        planted=planted,
        nucleus_types=nucleus_types,
    )
