"""Weak-to-strong generalization evidence: per-nucleus difficulty features,
correctness labeling of teacher and student masks against ground truth,
feature-space robustness and expansion-rate estimates, and the error-rate
upper bound they feed.

Nuclei are represented by 80x80 patches centered on ground-truth centroids
(zero padded at borders); the overlapping / non-overlapping status that
selects the correctness criterion comes from ground-truth adjacency.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .raster import (
    AnnotationSet,
    ChannelStack,
    InstanceMask,
    bboxes_intersect,
    boundary_pixels,
    intersection_area,
    iou,
)

log = logging.getLogger(__name__)

PATCH_SIZE = 80

FEATURE_NAMES = (
    "foreground_contrast",
    "occlusion_score",
    "boundary_variability",
    "nucleus_size",
    "aspect_ratio",
    "edge_intensity",
    "background_variability",
)


@dataclass(frozen=True)
class DifficultyFeatures:
    foreground_contrast: float
    occlusion_score: float
    boundary_variability: float
    nucleus_size: float
    aspect_ratio: float
    edge_intensity: float
    background_variability: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)

    def __post_init__(self):
        if not (0.0 <= self.occlusion_score <= 1.0):
            raise ValueError(f"occlusion_score out of [0,1]: {self.occlusion_score}")
        if not (0.0 < self.nucleus_size <= 1.0):
            raise ValueError(f"nucleus_size out of (0,1]: {self.nucleus_size}")
        if self.aspect_ratio <= 0:
            raise ValueError(f"aspect_ratio must be positive: {self.aspect_ratio}")


@dataclass(frozen=True)
class LabeledPatch:
    """An 80x80 intensity window centered on one nucleus, plus its labels."""

    mask_id: int
    window: np.ndarray  # (80, 80) float64 nuclear intensity, zero padded
    mask_bits: np.ndarray  # (80, 80) bool, mask within the window
    features: DifficultyFeatures | None = None
    pseudo_correct: bool | None = None
    student_correct: bool | None = None

    def __post_init__(self):
        if self.window.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {self.window.shape}")


def centroid(mask: InstanceMask) -> tuple[float, float]:
    """Pixel-mean centroid (x, y) of the mask in its frame."""
    ys, xs = np.nonzero(mask.decode())
    return float(xs.mean()) + mask.bbox[0], float(ys.mean()) + mask.bbox[1]


def _window_at(image: np.ndarray, cx: int, cy: int) -> np.ndarray:
    half = PATCH_SIZE // 2
    out = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=np.float64)
    h, w = image.shape
    x0, y0 = cx - half, cy - half
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(w, x0 + PATCH_SIZE), min(h, y0 + PATCH_SIZE)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = image[sy0:sy1, sx0:sx1]
    return out


def extract_patches(tile: ChannelStack, aset: AnnotationSet) -> list[LabeledPatch]:
    """One zero-padded 80x80 nuclear-intensity window per instance, centered
    on the instance centroid."""
    intensity = tile.nuclear_max().astype(np.float64)
    frame = np.zeros((tile.height, tile.width), dtype=bool)
    patches = []
    for m in aset.instances:
        cx, cy = centroid(m)
        cxi, cyi = int(round(cx)), int(round(cy))
        window = _window_at(intensity, cxi, cyi)
        frame[:] = False
        x, y, w, h = m.bbox
        frame[y : y + h, x : x + w] = m.decode()
        bits = _window_at(frame.astype(np.float64), cxi, cyi) > 0.5
        patches.append(LabeledPatch(mask_id=m.id, window=window, mask_bits=bits))
    return patches


def difficulty_features(
    patch: LabeledPatch,
    mask: InstanceMask,
    neighbors: list[InstanceMask],
) -> DifficultyFeatures:
    """The 7 difficulty descriptors of one nucleus within its window."""
    window, bits = patch.window, patch.mask_bits
    inside = window[bits]
    outside = window[~bits]
    contrast = float(inside.mean() - (outside.mean() if outside.size else 0.0))

    overlap_px = 0
    for nb in neighbors:
        if nb.id != mask.id and bboxes_intersect(nb.bbox, mask.bbox):
            overlap_px += intersection_area(mask, nb)
    occlusion = min(1.0, overlap_px / mask.area)

    border = boundary_pixels(bits)
    n_border = int(border.sum())
    area_in_window = int(bits.sum())
    boundary_var = n_border / area_in_window if area_in_window else 0.0

    size = max(area_in_window, 1) / float(PATCH_SIZE * PATCH_SIZE)
    aspect = mask.bbox[2] / mask.bbox[3]
    edge_intensity = float(window[border].mean()) if n_border else 0.0
    background_var = float(outside.std()) if outside.size else 0.0
    return DifficultyFeatures(
        foreground_contrast=contrast,
        occlusion_score=occlusion,
        boundary_variability=boundary_var,
        nucleus_size=size,
        aspect_ratio=aspect,
        edge_intensity=edge_intensity,
        background_variability=background_var,
    )


# ---------------------------------------------------------------------------
# Correctness and neighborhood statistics
# ---------------------------------------------------------------------------


def correctness_label(
    pred: InstanceMask | None,
    gt: InstanceMask,
    is_overlapping: bool,
    iou_plain: float = 0.7,
    iou_overlap: float = 0.5,
    min_overlap_px: int = 10,
) -> bool:
    """Correct prediction: IoU above 0.7 for isolated nuclei; for nuclei
    overlapped by others, IoU above 0.5 plus at least 10 covered pixels of
    the overlap region. Missing predictions are incorrect."""
    if pred is None:
        return False
    value = iou(pred, gt)
    if not is_overlapping:
        return value > iou_plain
    overlap_region = gt.decode_overlap()
    if overlap_region is not None:
        gx, gy, gw, gh = gt.bbox
        region = InstanceMask.from_bitmask(-1, overlap_region, origin=(gx, gy)) \
            if overlap_region.any() else None
        covered = intersection_area(pred, region) if region is not None else 0
    else:
        covered = intersection_area(pred, gt)
    return value > iou_overlap and covered >= min_overlap_px


def standardize(features: np.ndarray) -> np.ndarray:
    """Per-dimension z-score; constant dimensions pass through as zeros."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (features - mu) / sd


def _knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors per row (self excluded); distance
    ties break toward the lower index."""
    n = points.shape[0]
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    idx = np.arange(n)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((idx, d2[i]))
        out[i] = order[:k]
    return out


def robustness(
    points: np.ndarray, labels: np.ndarray, k_nn: int = 5
) -> float:
    """1 - |R|/N where R is the set of points whose k nearest neighbors (in
    z-scored feature space) all share the point's label. 0 means every
    neighborhood is label-pure."""
    labels = np.asarray(labels, dtype=bool)
    n = points.shape[0]
    if n < k_nn + 1:
        raise ValueError(f"need at least {k_nn + 1} points, got {n}")
    z = standardize(np.asarray(points, dtype=np.float64))
    nbrs = _knn_indices(z, k_nn)
    disagree = (labels[nbrs] != labels[:, None]).mean(axis=1)
    robust = disagree == 0.0
    return 1.0 - float(robust.sum()) / n


def expansion_rate(bad: np.ndarray, good: np.ndarray, k_nn: int = 5) -> float:
    """Neighborhood mixing of the incorrectly pseudo-labeled set into the
    correctly labeled one: mean fraction of each bad point's k nearest
    neighbors (over the combined, z-scored set) that are good points."""
    bad = np.asarray(bad, dtype=np.float64)
    good = np.asarray(good, dtype=np.float64)
    if bad.size == 0 or good.size == 0:
        raise ValueError("both point sets must be non-empty")
    combined = np.vstack([bad, good])
    if combined.shape[0] < k_nn + 1:
        raise ValueError(f"need at least {k_nn + 1} total points")
    z = standardize(combined)
    nbrs = _knn_indices(z, k_nn)
    is_good = np.zeros(combined.shape[0], dtype=bool)
    is_good[bad.shape[0] :] = True
    frac_good = is_good[nbrs[: bad.shape[0]]].mean(axis=1)
    return float(frac_good.mean())


def error_bound(
    alpha: float, robustness_p: float, err_student_vs_pseudo: float, c: float
) -> float:
    """Upper bound on the student-vs-truth error rate from the pseudo-label
    error rate, robustness, student-vs-pseudo error, and expansion rate:
    2a/(1-2a) * P + err + a * (1 - 1.5c)."""
    if not (0.0 <= alpha < 0.5):
        raise ValueError(f"bound requires 0 <= alpha < 0.5, got {alpha}")
    return (
        (2.0 * alpha / (1.0 - 2.0 * alpha)) * robustness_p
        + err_student_vs_pseudo
        + alpha * (1.0 - 1.5 * c)
    )


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class W2sReport:
    alpha_i: float
    expansion_c: float | None
    robustness_p: float
    err_student_vs_pseudo: float
    err_student_vs_gt: float
    bound: float | None
    n_objects: int

    def to_dict(self) -> dict:
        return {
            "alpha_i": self.alpha_i,
            "expansion_c": self.expansion_c,
            "robustness_p": self.robustness_p,
            "err_student_vs_pseudo": self.err_student_vs_pseudo,
            "err_student_vs_gt": self.err_student_vs_gt,
            "bound": self.bound,
            "n_objects": self.n_objects,
        }


@dataclass(frozen=True)
class FeatureRow:
    tile_id: str
    mask_id: int
    features: DifficultyFeatures
    pseudo_correct: bool
    student_correct: bool


def _neighbor_overlap(mask: InstanceMask, neighbors) -> np.ndarray:
    """Bbox-local bits of the mask covered by any other instance."""
    x, y, w, h = mask.bbox
    acc = np.zeros((h, w), dtype=bool)
    for nb in neighbors:
        if nb.id == mask.id or not bboxes_intersect(nb.bbox, mask.bbox):
            continue
        nx, ny, nw, nh = nb.bbox
        x0, y0 = max(x, nx), max(y, ny)
        x1, y1 = min(x + w, nx + nw), min(y + h, ny + nh)
        if x1 > x0 and y1 > y0:
            acc[y0 - y : y1 - y, x0 - x : x1 - x] |= nb.decode()[
                y0 - ny : y1 - ny, x0 - nx : x1 - nx
            ]
    return acc & mask.decode()


def _best_match(gt_mask: InstanceMask, candidates) -> InstanceMask | None:
    best, best_iou = None, 0.0
    for c in candidates:
        if not bboxes_intersect(gt_mask.bbox, c.bbox):
            continue
        v = iou(gt_mask, c)
        if v > best_iou:
            best, best_iou = c, v
    return best


def build_w2s_report(
    gt: dict[str, AnnotationSet],
    pseudo: dict[str, AnnotationSet],
    student: dict[str, AnnotationSet],
    tiles: dict[str, ChannelStack],
    k_nn: int = 5,
) -> tuple[W2sReport, list[FeatureRow]]:
    """Assemble the full diagnostics over ground-truth nuclei.

    Per ground-truth nucleus: the best-IoU pseudo and student masks are
    located; teacher correctness (vs truth) defines alpha and the bad/good
    split, student correctness (vs truth) gives err(f,y) and the robustness
    labels, and student-vs-pseudo correctness gives err(f,~y). The bound is
    evaluated from those measured inputs (None when alpha >= 0.5).
    """
    rows: list[FeatureRow] = []
    feats: list[np.ndarray] = []
    pseudo_ok: list[bool] = []
    student_ok: list[bool] = []
    student_vs_pseudo_ok: list[bool] = []

    for tile_id in sorted(gt):
        gset = gt[tile_id]
        pset = pseudo.get(tile_id, AnnotationSet(tile_id, (), "raw"))
        sset = student.get(tile_id, AnnotationSet(tile_id, (), "raw"))
        stack = tiles[tile_id]
        patches = {p.mask_id: p for p in extract_patches(stack, gset)}
        neighbors = list(gset.instances)
        for g in gset.instances:
            overlap_bits = _neighbor_overlap(g, neighbors)
            overlapping = overlap_bits.any()
            g_ref = g.with_components(overlap_bits) if overlapping else g
            p_match = _best_match(g, pset.instances)
            s_match = _best_match(g, sset.instances)
            p_ok = correctness_label(p_match, g_ref, overlapping)
            s_ok = correctness_label(s_match, g_ref, overlapping)
            if p_match is None and s_match is None:
                sp_ok = True  # both silent: student agrees with the teacher
            elif p_match is None or s_match is None:
                sp_ok = False
            else:
                sp_ok = correctness_label(s_match, p_match, overlapping)
            f = difficulty_features(patches[g.id], g, neighbors)
            rows.append(FeatureRow(tile_id, g.id, f, p_ok, s_ok))
            feats.append(f.as_array())
            pseudo_ok.append(p_ok)
            student_ok.append(s_ok)
            student_vs_pseudo_ok.append(sp_ok)

    if not rows:
        raise ValueError("no ground-truth nuclei to diagnose")
    features = np.vstack(feats)
    pseudo_ok_arr = np.array(pseudo_ok)
    student_ok_arr = np.array(student_ok)
    alpha = 1.0 - float(pseudo_ok_arr.mean())
    err_fy = 1.0 - float(student_ok_arr.mean())
    err_fpseudo = 1.0 - float(np.mean(student_vs_pseudo_ok))
    rob = robustness(features, student_ok_arr, k_nn=k_nn)

    bad = features[~pseudo_ok_arr]
    good = features[pseudo_ok_arr]
    c = None
    if len(bad) and len(good) and len(features) >= k_nn + 1:
        c = expansion_rate(bad, good, k_nn=k_nn)

    bound = None
    if alpha < 0.5:
        bound = error_bound(alpha, rob, err_fpseudo, c if c is not None else 0.0)
    else:
        log.warning("alpha_i = %.3f >= 0.5: error bound diverges", alpha)
    report = W2sReport(
        alpha_i=alpha,
        expansion_c=c,
        robustness_p=rob,
        err_student_vs_pseudo=err_fpseudo,
        err_student_vs_gt=err_fy,
        bound=bound,
        n_objects=len(rows),
    )
    return report, rows
