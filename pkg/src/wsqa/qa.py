"""Automated segmentation quality metrics.

Unsupervised: signal coverage (fraction of nuclear-stain foreground covered
by the masks) and marker purity (dominance of a single cell-type marker's
signal within each object, via sparse decomposition over marker-foreground
atoms). Supervised: AJI+ under optimal one-to-one IoU matching and panoptic
quality with unique IoU > 0.5 matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .gmm import GmmError, gmm_fit_1d, subsample, two_component_threshold
from .omp import relu_omp
from .raster import AnnotationSet, ChannelStack, bboxes_intersect, intersection_area

GMM_FIT_SAMPLE_LIMIT = 200_000


class QaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Nuclear foreground and coverage
# ---------------------------------------------------------------------------


def foreground_mask(nuclear: ChannelStack, seed: int = 0) -> np.ndarray:
    """Nuclear foreground: per-pixel max of DAPI and PanHistone, fit with a
    two-component mixture, pixels assigned to the higher-mean component by
    posterior. The fit uses a seeded subsample on large tiles; assignment
    covers every pixel."""
    combined = nuclear.nuclear_max().astype(np.float64)
    model = gmm_fit_1d(
        subsample(combined.ravel(), GMM_FIT_SAMPLE_LIMIT, seed), 2, seed=seed
    )
    # posterior of the higher-mean (sorted last) component
    assign = model.assign(combined.ravel())
    return (assign == 1).reshape(combined.shape)


def coverage_counts(masks: AnnotationSet, fg: np.ndarray) -> tuple[int, int]:
    """(covered foreground pixels, total foreground pixels); additive across
    tiles so slide-level coverage is a ratio of sums."""
    total = int(np.count_nonzero(fg))
    h, w = fg.shape
    union = masks.union_frame(w, h)
    covered = int(np.count_nonzero(union & fg))
    return covered, total


def coverage_gamma(masks: AnnotationSet, fg: np.ndarray) -> float:
    """Fraction of nuclear-foreground pixels covered by the mask union."""
    covered, total = coverage_counts(masks, fg)
    if total == 0:
        raise QaError("foreground is empty: coverage undefined")
    return covered / total


# ---------------------------------------------------------------------------
# Marker purity
# ---------------------------------------------------------------------------


def marker_threshold(channel: np.ndarray, seed: int = 0) -> float:
    """Marker-channel foreground threshold from a three-component mixture:
    midpoint between the brightest value of the second-largest-mean cluster
    and the dimmest value of the largest-mean cluster. Keeps marker signal
    while dropping cytoplasm/autofluorescence haze."""
    values = np.asarray(channel, dtype=np.float64).ravel()
    model = gmm_fit_1d(subsample(values, GMM_FIT_SAMPLE_LIMIT, seed), 3, seed=seed)
    assign = model.assign(values)
    second, top = values[assign == 1], values[assign == 2]
    if second.size == 0 or top.size == 0:
        thr = 0.5 * (model.means[1] + model.means[2])
    else:
        thr = 0.5 * (float(second.max()) + float(top.min()))
    lo, hi = float(values.min()), float(values.max())
    return float(min(max(thr, np.nextafter(lo, hi)), np.nextafter(hi, lo)))


@dataclass(frozen=True)
class ObjectPurity:
    mask_id: int
    purity: float | None  # None when the object has no marker signal
    coefficients: tuple[float, ...]
    dominant_marker: str | None


@dataclass(frozen=True)
class PurityResult:
    per_object: tuple[ObjectPurity, ...]
    global_pi: float | None
    excluded_count: int
    marker_names: tuple[str, ...]


def purity(
    masks: AnnotationSet,
    markers: ChannelStack,
    marker_names: list[str],
    k: int = 3,
    seed: int = 0,
    thresholds: dict[str, float] | None = None,
) -> PurityResult:
    """Per-object marker purity.

    For each object, atoms are the per-marker foreground bits inside the
    object window; the sparse nonnegative decomposition of the object mask
    over those atoms is sum-normalized and its largest coefficient is the
    object's purity. Objects with no marker signal are excluded from the
    global mean and counted.
    """
    if not marker_names:
        raise QaError("at least one marker channel required")
    if thresholds is None:
        thresholds = {
            name: marker_threshold(markers.channel(name), seed) for name in marker_names
        }
    fg = {name: markers.channel(name) > thresholds[name] for name in marker_names}

    per_object: list[ObjectPurity] = []
    included: list[float] = []
    excluded = 0
    for m in masks.instances:
        x, y, w, h = m.bbox
        bits = m.decode()
        target = bits.ravel().astype(np.float64)
        atoms = np.stack(
            [(fg[name][y : y + h, x : x + w] & bits).ravel() for name in marker_names]
        ).astype(np.float64)
        result = relu_omp(target, atoms, k=k)
        if result.no_signal or result.coefficients.sum() <= 0:
            excluded += 1
            per_object.append(ObjectPurity(m.id, None, tuple(result.coefficients), None))
            continue
        alpha = result.normalized()
        top = int(np.argmax(alpha))
        pi_n = float(alpha[top])
        included.append(pi_n)
        per_object.append(
            ObjectPurity(m.id, pi_n, tuple(float(a) for a in alpha), marker_names[top])
        )
    global_pi = float(np.mean(included)) if included else None
    return PurityResult(tuple(per_object), global_pi, excluded, tuple(marker_names))


# ---------------------------------------------------------------------------
# Supervised metrics
# ---------------------------------------------------------------------------


def _pair_stats(gt: AnnotationSet, pred: AnnotationSet):
    """Intersection / IoU tables between two sets, bbox-pruned."""
    inter = np.zeros((len(gt), len(pred)), dtype=np.int64)
    for i, g in enumerate(gt.instances):
        for j, p in enumerate(pred.instances):
            if bboxes_intersect(g.bbox, p.bbox):
                inter[i, j] = intersection_area(g, p)
    g_areas = np.array([g.area for g in gt.instances], dtype=np.int64)
    p_areas = np.array([p.area for p in pred.instances], dtype=np.int64)
    union = g_areas[:, None] + p_areas[None, :] - inter
    iou_table = np.where(union > 0, inter / union, 0.0)
    return inter, union, iou_table, g_areas, p_areas


def aji_plus(gt: AnnotationSet, pred: AnnotationSet) -> float:
    """Aggregated Jaccard index with optimal one-to-one matching.

    Matching maximizes total IoU (Hungarian); matched intersections over
    matched unions, with unmatched instances from either side adding their
    full area to the denominator.
    """
    if len(gt) == 0:
        raise QaError("AJI+ undefined for empty ground truth")
    if len(pred) == 0:
        return 0.0
    inter, union, iou_table, g_areas, p_areas = _pair_stats(gt, pred)
    rows, cols = linear_sum_assignment(iou_table, maximize=True)
    matched_g, matched_p = set(), set()
    c_total, u_total = 0, 0
    for i, j in zip(rows, cols):
        if inter[i, j] > 0:
            c_total += int(inter[i, j])
            u_total += int(union[i, j])
            matched_g.add(i)
            matched_p.add(j)
    u_total += int(sum(a for i, a in enumerate(g_areas) if i not in matched_g))
    u_total += int(sum(a for j, a in enumerate(p_areas) if j not in matched_p))
    return c_total / u_total


def panoptic_quality(
    gt: AnnotationSet, pred: AnnotationSet, match_iou: float = 0.5
) -> tuple[float, float, float]:
    """(PQ, SQ, RQ) with matches at IoU > match_iou (unique for 0.5)."""
    if len(gt) == 0 and len(pred) == 0:
        raise QaError("PQ undefined when both sets are empty")
    if len(gt) == 0 or len(pred) == 0:
        return 0.0, 0.0, 0.0
    _, _, iou_table, _, _ = _pair_stats(gt, pred)
    pairs = np.argwhere(iou_table > match_iou)
    tp = len(pairs)
    iou_sum = float(iou_table[pairs[:, 0], pairs[:, 1]].sum()) if tp else 0.0
    fp = len(pred) - tp
    fn = len(gt) - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    pq = iou_sum / denom if denom > 0 else 0.0
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom if denom > 0 else 0.0
    return pq, sq, rq


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QaReport:
    coverage_gamma: float
    purity: PurityResult
    cell_count: int
    aji_plus: float | None = None
    pq: float | None = None
    per_tile: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "coverage_gamma": self.coverage_gamma,
            "purity": {
                "global_pi": self.purity.global_pi,
                "excluded_count": self.purity.excluded_count,
                "marker_names": list(self.purity.marker_names),
            },
            "cell_count": self.cell_count,
            "aji_plus": self.aji_plus,
            "pq": self.pq,
        }
        if self.per_tile:
            doc["per_tile"] = self.per_tile
        return doc


def qa_report(
    tiles: list[tuple[ChannelStack, AnnotationSet]],
    marker_names: list[str],
    seed: int = 0,
) -> tuple[QaReport, list[tuple[str, ObjectPurity]]]:
    """Coverage, purity, and cell count over a batch of tiles.

    Coverage aggregates pixel counts across tiles; purity averages over all
    objects with marker signal. Returns the report plus the per-object
    purity rows (tile id tagged) for the proofreading CSV.
    """
    covered_total = 0
    fg_total = 0
    all_rows: list[tuple[str, ObjectPurity]] = []
    included: list[float] = []
    excluded = 0
    cells = 0
    per_tile: dict = {}
    for stack, aset in tiles:
        fg = foreground_mask(stack, seed)
        covered, total = coverage_counts(aset, fg)
        covered_total += covered
        fg_total += total
        cells += len(aset)
        tile_purity = None
        if marker_names:
            pres = purity(aset, stack, marker_names, seed=seed)
            excluded += pres.excluded_count
            included.extend(o.purity for o in pres.per_object if o.purity is not None)
            all_rows.extend((aset.tile_id, o) for o in pres.per_object)
            tile_purity = pres.global_pi
        per_tile[aset.tile_id] = {
            "coverage_gamma": covered / total if total else None,
            "purity": tile_purity,
            "cell_count": len(aset),
        }
    if fg_total == 0:
        raise QaError("no nuclear foreground found in any tile")
    report = QaReport(
        coverage_gamma=covered_total / fg_total,
        purity=PurityResult(
            per_object=(),
            global_pi=float(np.mean(included)) if included else None,
            excluded_count=excluded,
            marker_names=tuple(marker_names),
        ),
        cell_count=cells,
        per_tile=per_tile,
    )
    return report, all_rows
