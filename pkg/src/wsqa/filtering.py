"""Rule-based curation of weak-teacher masks: union-mask removal, duplicate
removal, dim-nucleus rejection, and the consensus post-processing pass.

All rules only keep or drop masks, never modify them, and evaluate against
the original input set, so the pass is idempotent and order-independent.
Every removal is recorded in an audit list (mask id, rule, measured ratios).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .gmm import GmmError, gmm_fit_1d, subsample, two_component_threshold
from .raster import (
    TAU_SOLID,
    AnnotationSet,
    ChannelStack,
    InstanceMask,
    bboxes_intersect,
    containment,
    intersection_area,
    iou,
    is_nonconcave,
    rle_encode,
)

log = logging.getLogger(__name__)

GMM_FIT_SAMPLE_LIMIT = 200_000


@dataclass(frozen=True)
class FilterParams:
    beta1: float = 0.8
    beta2: float = 0.7
    beta3: float = 0.5
    recover_branches: bool = False
    tau_solid: float = TAU_SOLID
    seed: int = 0

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must be in (0, 1), got {v}")


@dataclass
class RemovalRecord:
    tile_id: str
    mask_id: int
    rule: str
    ratios: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "mask_id": self.mask_id,
            "rule": self.rule,
            **{k: round(float(v), 6) for k, v in self.ratios.items()},
        }


def find_union_components(
    target: InstanceMask, aset: AnnotationSet, beta1: float
) -> list[InstanceMask]:
    """Masks m (other than target) mostly swallowed by target:
    |target ∩ m| / |m| > beta1."""
    out = []
    for m in aset.instances:
        if m.id == target.id:
            continue
        if not bboxes_intersect(target.bbox, m.bbox):
            continue
        if containment(target, m) > beta1:
            out.append(m)
    return out


def _components_union_coverage(target: InstanceMask, components) -> float:
    """|union(components) ∩ target| / |target|."""
    x, y, w, h = target.bbox
    merged = np.zeros((h, w), dtype=bool)
    for m in components:
        mx, my, mw, mh = m.bbox
        x0, y0 = max(x, mx), max(y, my)
        x1, y1 = min(x + w, mx + mw), min(y + h, my + mh)
        if x1 <= x0 or y1 <= y0:
            continue
        merged[y0 - y : y1 - y, x0 - x : x1 - x] |= m.decode()[
            y0 - my : y1 - my, x0 - mx : x1 - mx
        ]
    covered = int(np.count_nonzero(merged & target.decode()))
    return covered / target.area


def _difference_mask(a: InstanceMask, b: InstanceMask, new_id: int) -> InstanceMask | None:
    """a minus b as a fresh mask, or None when (nearly) nothing remains."""
    x, y, w, h = a.bbox
    bits = np.array(a.decode())
    bx, by, bw, bh = b.bbox
    x0, y0 = max(x, bx), max(y, by)
    x1, y1 = min(x + w, bx + bw), min(y + h, by + bh)
    if x1 > x0 and y1 > y0:
        bits[y0 - y : y1 - y, x0 - x : x1 - x] &= ~b.decode()[
            y0 - by : y1 - by, x0 - bx : x1 - bx
        ]
    if int(bits.sum()) < 3:
        return None
    return InstanceMask.from_bitmask(new_id, bits, origin=(x, y))


def remove_union_masks(
    aset: AnnotationSet,
    beta1: float,
    beta2: float,
    *,
    recover: bool = False,
    is_nuclei=None,
) -> tuple[AnnotationSet, list[RemovalRecord]]:
    """Drop masks that merely union two or more smaller masks.

    A target is discarded iff it has more than one component (masks it
    contains above beta1) and those components cover more than beta2 of it.
    With recover=True, for each kept target the target-minus-component
    difference masks passing the is_nuclei predicate are re-added.
    """
    removed: list[RemovalRecord] = []
    survivors: list[InstanceMask] = []
    recovered: list[InstanceMask] = []
    next_id = aset.next_id()
    for target in aset.instances:
        components = find_union_components(target, aset, beta1)
        if len(components) > 1:
            coverage = _components_union_coverage(target, components)
            if coverage > beta2:
                removed.append(
                    RemovalRecord(
                        aset.tile_id,
                        target.id,
                        "union",
                        {"component_coverage": coverage, "components": len(components)},
                    )
                )
                continue
        survivors.append(target)
        if recover and is_nuclei is not None:
            for comp in components:
                diff = _difference_mask(target, comp, next_id)
                if diff is not None and is_nuclei(diff):
                    recovered.append(diff)
                    next_id += 1
    return aset.with_instances(tuple(survivors + recovered)), removed


def remove_duplicates(
    aset: AnnotationSet,
    beta3: float,
    *,
    recover: bool = False,
    is_nuclei=None,
) -> tuple[AnnotationSet, list[RemovalRecord]]:
    """Drop masks mostly covered by a strictly larger mask.

    p is a duplicate iff some q has |p ∩ q| / |p| > beta3 and |p| < |q|.
    Equal-area mutual near-copies survive the predicate; pixel-identical
    survivors are then collapsed to the first occurrence.

    With recover=True, the q-minus-p remainder of each discarded duplicate
    is re-added when it passes is_nuclei and q actually loses a material
    part (remainder below 90% of q): the sibling-nucleus case.
    """
    removed: list[RemovalRecord] = []
    survivors: list[InstanceMask] = []
    recovered: list[InstanceMask] = []
    next_id = aset.next_id()
    for p in aset.instances:
        dup_of = None
        ratio = 0.0
        for q in aset.instances:
            if p.id == q.id or not bboxes_intersect(p.bbox, q.bbox):
                continue
            overlap_frac = intersection_area(p, q) / p.area
            if overlap_frac > beta3 and p.area < q.area:
                dup_of, ratio = q, overlap_frac
                break
        if dup_of is not None:
            removed.append(
                RemovalRecord(
                    aset.tile_id,
                    p.id,
                    "duplicate",
                    {"overlap_over_self": ratio, "area_ratio": p.area / dup_of.area},
                )
            )
            if recover and is_nuclei is not None:
                diff = _difference_mask(dup_of, p, next_id)
                if diff is not None and diff.area < 0.9 * dup_of.area and is_nuclei(diff):
                    recovered.append(diff)
                    next_id += 1
            continue
        survivors.append(p)

    # collapse bit-identical survivors (equal-area mutual duplicates)
    seen: dict[tuple, InstanceMask] = {}
    unique: list[InstanceMask] = []
    for m in survivors:
        key = (m.bbox, m.rle)
        if key in seen:
            removed.append(RemovalRecord(aset.tile_id, m.id, "exact-duplicate", {}))
            continue
        seen[key] = m
        unique.append(m)
    return aset.with_instances(tuple(unique + recovered)), removed


def nuclear_foreground_threshold(
    nuclear: ChannelStack, seed: int = 0
) -> float | None:
    """Two-component GMM foreground boundary of max(DAPI, PanHistone).

    Returns None when the fit is degenerate (constant tile); callers then
    keep everything and warn.
    """
    pixels = nuclear.nuclear_max().astype(np.float64).ravel()
    try:
        model = gmm_fit_1d(subsample(pixels, GMM_FIT_SAMPLE_LIMIT, seed), 2, seed=seed)
    except GmmError as exc:
        log.warning("tile foreground GMM failed (%s); dim filter disabled", exc)
        return None
    return two_component_threshold(model)


def mask_mean_intensity(mask: InstanceMask, image: np.ndarray) -> float:
    x, y, w, h = mask.bbox
    window = image[y : y + h, x : x + w]
    return float(window[mask.decode()].mean())


def filter_dim(
    aset: AnnotationSet,
    nuclear: ChannelStack,
    seed: int = 0,
    threshold: float | None = None,
) -> tuple[AnnotationSet, list[RemovalRecord]]:
    """Keep masks whose mean nuclear intensity strictly exceeds the tile's
    foreground threshold. On GMM failure all masks are kept."""
    if threshold is None:
        threshold = nuclear_foreground_threshold(nuclear, seed)
    if threshold is None:
        return aset, []
    intensity = nuclear.nuclear_max()
    removed: list[RemovalRecord] = []
    survivors = []
    for m in aset.instances:
        mean = mask_mean_intensity(m, intensity)
        if mean > threshold:
            survivors.append(m)
        else:
            removed.append(
                RemovalRecord(
                    aset.tile_id, m.id, "dim", {"mean_intensity": mean, "threshold": threshold}
                )
            )
    return aset.with_instances(tuple(survivors)), removed


def run_algorithm1(
    tiles: list[tuple[ChannelStack, AnnotationSet]],
    params: FilterParams = FilterParams(),
) -> tuple[list[AnnotationSet], list[RemovalRecord]]:
    """Per tile: union removal, then duplicate removal, then dim rejection.

    Output sets carry stage "filtered" and are always subsets of the input
    (unless the optional recovery branches are enabled). Accepts already
    filtered sets so the pass can be re-applied; it is idempotent.
    """
    out: list[AnnotationSet] = []
    audit: list[RemovalRecord] = []
    for nuclear, aset in tiles:
        threshold = nuclear_foreground_threshold(nuclear, params.seed)
        is_nuclei = None
        if params.recover_branches:
            intensity = nuclear.nuclear_max()

            def is_nuclei(m, _img=intensity, _thr=threshold):
                if _thr is not None and mask_mean_intensity(m, _img) <= _thr:
                    return False
                return is_nonconcave(m, params.tau_solid)

        step1, removed1 = remove_union_masks(
            aset, params.beta1, params.beta2,
            recover=params.recover_branches, is_nuclei=is_nuclei,
        )
        step2, removed2 = remove_duplicates(
            step1, params.beta3,
            recover=params.recover_branches, is_nuclei=is_nuclei,
        )
        step3, removed3 = filter_dim(step2, nuclear, params.seed, threshold=threshold)
        audit.extend(removed1 + removed2 + removed3)
        out.append(step3.with_instances(step3.instances, stage="filtered"))
    return out, audit


def consensus_postprocess(
    primary: AnnotationSet,
    remover_ref: AnnotationSet,
    recover_refs: list[AnnotationSet],
    match_iou: float = 0.5,
) -> AnnotationSet:
    """Two-stage cross-referencing cleanup.

    Stage 1 drops primary masks with no reference match above match_iou;
    stage 2 appends reference masks (from each recover set, in order) that
    match nothing already present. Appended masks get fresh ids.
    """

    def best_iou(mask, others) -> float:
        best = 0.0
        for o in others:
            if bboxes_intersect(mask.bbox, o.bbox):
                best = max(best, iou(mask, o))
        return best

    pruned = [
        m for m in primary.instances if best_iou(m, remover_ref.instances) > match_iou
    ]
    current = list(pruned)
    next_id = max((m.id for m in current), default=0) + 1
    for ref in recover_refs:
        for m in ref.instances:
            if best_iou(m, current) <= match_iou:
                current.append(m.with_id(next_id))
                next_id += 1
    return primary.with_instances(tuple(current))
