"""Pipeline orchestration: stage implementations over an on-disk tile tree,
the run manifest (stage durations, input hashes, resolved config), and the
per-tile process pool.

Layout under the output directory:
    tiles/<tile_id>/          per-channel rasters, tile.json, teacher.json,
                              optional gt.json / student.json, filtered.json
    augmented/<tile_id>/      augmented rasters + augmented.json
    filter_audit.jsonl, augment_log.jsonl
    qa_report.json, purity_objects.csv, eval.json, eval_tiles.csv,
    w2s.json, features.csv, slide_masks.json, manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import augment as aug
from . import filtering, qa, tiling, w2s
from .config import PipelineConfig
from .raster import AnnotationSet, annotation_to_dict, dump_json, load_annotation
from .storage import load_stack, load_stack_dir, save_stack_dir
from .w2s import FEATURE_NAMES

TILE_RASTER_FMT = "tif"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def sha256_path(path) -> str:
    """Content hash of a file, or of a directory tree (stable over order)."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(p.rglob("*")):
            if f.is_file():
                h.update(f.name.encode())
                h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def discover_tiles(root) -> dict[str, Path]:
    """tile_id -> tile directory, sorted."""
    root = Path(root)
    out = {}
    for p in sorted(root.iterdir()):
        if p.is_dir() and p.name.startswith("tile_"):
            out[p.name] = p
    if not out:
        raise FileNotFoundError(f"no tile_* directories under {root}")
    return out


def load_mask_collection(path, stem: str | None = None) -> dict[str, tuple]:
    """tile_id -> (AnnotationSet, width, height).

    Accepts a single mask JSON file, a directory of <tile_id>.json files, or
    a tile tree where each tile dir holds <stem>.json.
    """
    p = Path(path)
    if p.is_file():
        aset, w, h = load_annotation(p)
        return {aset.tile_id: (aset, w, h)}
    out = {}
    for child in sorted(p.iterdir()):
        if child.is_file() and child.suffix == ".json":
            aset, w, h = load_annotation(child)
            out[aset.tile_id] = (aset, w, h)
        elif child.is_dir() and stem and (child / f"{stem}.json").exists():
            aset, w, h = load_annotation(child / f"{stem}.json")
            out[aset.tile_id] = (aset, w, h)
    if not out:
        raise FileNotFoundError(f"no mask JSON found under {p} (stem={stem})")
    return out


def _resolve_workers(workers: int) -> int:
    return workers if workers > 0 else (os.cpu_count() or 1)


def map_tiles(fn, jobs: list, workers: int):
    """Run fn over jobs, optionally in a process pool; results keep job order."""
    n = _resolve_workers(workers)
    if n <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * n))))


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Stage: dice
# ---------------------------------------------------------------------------


def stage_dice(
    images_path,
    out_tiles: Path,
    tile_size: int,
    overlap: int,
    mask_sources: dict[str, str] | None = None,
) -> list[str]:
    """Cut the slide into tile directories; also dice any slide-frame mask
    sets (name -> path) into per-tile <name>.json files."""
    slide = load_stack(images_path)
    indices = tiling.dice_indices(slide.width, slide.height, tile_size, overlap)
    sets = {}
    for name, src in (mask_sources or {}).items():
        aset, _, _ = load_annotation(src)
        sets[name] = tiling.dice_annotations(aset, indices)
    out_tiles.mkdir(parents=True, exist_ok=True)
    for ti in indices:
        tdir = out_tiles / ti.tile_id
        crop = slide.crop(ti.origin[0], ti.origin[1], ti.extent[0], ti.extent[1])
        save_stack_dir(tdir, crop, fmt=TILE_RASTER_FMT)
        dump_json(ti.to_dict(), tdir / "tile.json")
        for name, per_tile in sets.items():
            aset = per_tile[ti.tile_id]
            dump_json(
                annotation_to_dict(aset, ti.extent[0], ti.extent[1]),
                tdir / f"{name}.json",
            )
    return [ti.tile_id for ti in indices]


# ---------------------------------------------------------------------------
# Stage: filter
# ---------------------------------------------------------------------------


def _filter_tile_job(args):
    tile_dir, mask_name, params = args
    tile_dir = Path(tile_dir)
    stack = load_stack_dir(tile_dir)
    aset, w, h = load_annotation(tile_dir / f"{mask_name}.json")
    [filtered], audit = filtering.run_algorithm1([(stack, aset)], params)
    dump_json(annotation_to_dict(filtered, w, h), tile_dir / "filtered.json")
    return [a.to_dict() for a in audit]


def stage_filter(
    tiles_root,
    params: filtering.FilterParams,
    audit_path,
    mask_name: str = "teacher",
    workers: int = 1,
) -> int:
    tiles = discover_tiles(tiles_root)
    jobs = [(str(d), mask_name, params) for d in tiles.values()]
    results = map_tiles(_filter_tile_job, jobs, workers)
    with open(audit_path, "w") as fh:
        for recs in results:
            for rec in recs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return sum(len(r) for r in results)


# ---------------------------------------------------------------------------
# Stage: augment
# ---------------------------------------------------------------------------


def _augment_tile_job(args):
    tile_dir, out_dir, tile_index, params = args
    tile_dir, out_dir = Path(tile_dir), Path(out_dir)
    stack = load_stack_dir(tile_dir)
    aset, w, h = load_annotation(tile_dir / "filtered.json")
    seeded = replace(
        params, rng_seed=int(np.uint64(params.rng_seed) ^ np.uint64(tile_index))
    )
    [(new_stack, new_set)], records = aug.run_algorithm2([(stack, aset)], seeded)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_stack_dir(out_dir, new_stack, fmt=TILE_RASTER_FMT)
    dump_json(annotation_to_dict(new_set, w, h), out_dir / "augmented.json")
    if (tile_dir / "tile.json").exists():
        (out_dir / "tile.json").write_text((tile_dir / "tile.json").read_text())
    return [r.to_dict() for r in records]


def stage_augment(
    tiles_root,
    out_root,
    params: aug.AugmentParams,
    log_path,
    workers: int = 1,
) -> int:
    tiles = discover_tiles(tiles_root)
    out_root = Path(out_root)
    jobs = [
        (str(d), str(out_root / tid), i, params)
        for i, (tid, d) in enumerate(sorted(tiles.items()))
    ]
    results = map_tiles(_augment_tile_job, jobs, workers)
    with open(log_path, "w") as fh:
        for recs in results:
            for rec in recs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return sum(len(r) for r in results)


# ---------------------------------------------------------------------------
# Stage: qa
# ---------------------------------------------------------------------------


def _qa_tile_job(args):
    tile_dir, mask_name, markers, seed = args
    tile_dir = Path(tile_dir)
    stack = load_stack_dir(tile_dir)
    aset, _, _ = load_annotation(tile_dir / f"{mask_name}.json")
    fg = qa.foreground_mask(stack, seed)
    covered, total = qa.coverage_counts(aset, fg)
    rows = []
    included = []
    excluded = 0
    if markers:
        pres = qa.purity(aset, stack, list(markers), seed=seed)
        excluded = pres.excluded_count
        for o in pres.per_object:
            rows.append(
                [
                    aset.tile_id,
                    o.mask_id,
                    "" if o.purity is None else f"{o.purity:.6f}",
                    o.dominant_marker or "",
                    *[f"{c:.6f}" for c in o.coefficients],
                ]
            )
            if o.purity is not None:
                included.append(o.purity)
    return aset.tile_id, covered, total, len(aset), rows, included, excluded


def stage_qa(
    tiles_root,
    markers: list[str],
    report_path,
    csv_path,
    mask_name: str = "filtered",
    seed: int = 0,
    workers: int = 1,
) -> dict:
    tiles = discover_tiles(tiles_root)
    jobs = [(str(d), mask_name, tuple(markers), seed) for d in tiles.values()]
    results = map_tiles(_qa_tile_job, jobs, workers)
    covered = sum(r[1] for r in results)
    total = sum(r[2] for r in results)
    cells = sum(r[3] for r in results)
    included = [v for r in results for v in r[5]]
    excluded = sum(r[6] for r in results)
    if total == 0:
        raise qa.QaError("no nuclear foreground found in any tile")
    report = {
        "coverage_gamma": covered / total,
        "purity": {
            "global_pi": float(np.mean(included)) if included else None,
            "excluded_count": excluded,
            "marker_names": list(markers),
        },
        "cell_count": cells,
        "aji_plus": None,
        "pq": None,
        "per_tile": {
            r[0]: {
                "coverage_gamma": (r[1] / r[2]) if r[2] else None,
                "cell_count": r[3],
            }
            for r in results
        },
    }
    dump_json(report, report_path)
    header = ["tile_id", "mask_id", "purity", "dominant_marker", *markers]
    write_csv(csv_path, header, [row for r in results for row in r[4]])
    return report


# ---------------------------------------------------------------------------
# Stage: eval
# ---------------------------------------------------------------------------


def evaluate_sets(gt: AnnotationSet, pred: AnnotationSet) -> dict:
    pq, sq, rq = qa.panoptic_quality(gt, pred)
    return {
        "aji_plus": qa.aji_plus(gt, pred),
        "pq": pq,
        "sq": sq,
        "rq": rq,
        "n_gt": len(gt),
        "n_pred": len(pred),
    }


def stage_eval(
    tiles_root,
    report_path,
    csv_path,
    gt_name: str = "gt",
    pred_name: str = "filtered",
) -> dict:
    tiles = discover_tiles(tiles_root)
    per_tile = {}
    for tid, tdir in tiles.items():
        gt_file = tdir / f"{gt_name}.json"
        pred_file = tdir / f"{pred_name}.json"
        if not gt_file.exists() or not pred_file.exists():
            continue
        gt_set, _, _ = load_annotation(gt_file)
        pred_set, _, _ = load_annotation(pred_file)
        if len(gt_set) == 0:
            continue
        per_tile[tid] = evaluate_sets(gt_set, pred_set)
    if not per_tile:
        raise qa.QaError("no tiles with ground truth to evaluate")
    report = {
        "mean_aji_plus": float(np.mean([v["aji_plus"] for v in per_tile.values()])),
        "mean_pq": float(np.mean([v["pq"] for v in per_tile.values()])),
        "tiles_evaluated": len(per_tile),
        "per_tile": per_tile,
    }
    dump_json(report, report_path)
    write_csv(
        csv_path,
        ["tile_id", "aji_plus", "pq", "sq", "rq", "n_gt", "n_pred"],
        [
            [tid, f"{v['aji_plus']:.6f}", f"{v['pq']:.6f}", f"{v['sq']:.6f}",
             f"{v['rq']:.6f}", v["n_gt"], v["n_pred"]]
            for tid, v in sorted(per_tile.items())
        ],
    )
    return report


# ---------------------------------------------------------------------------
# Stage: w2s
# ---------------------------------------------------------------------------


def stage_w2s(
    gt_path,
    pseudo_path,
    student_path,
    images_path,
    report_path,
    csv_path,
    k_nn: int = 5,
) -> dict:
    gt = {k: v[0] for k, v in load_mask_collection(gt_path, "gt").items()}
    pseudo = {k: v[0] for k, v in load_mask_collection(pseudo_path, "filtered").items()}
    student = {k: v[0] for k, v in load_mask_collection(student_path, "student").items()}
    images = Path(images_path)
    stacks = {}
    if images.is_dir() and any(p.name.startswith("tile_") for p in images.iterdir()):
        for tid, tdir in discover_tiles(images).items():
            if tid in gt:
                stacks[tid] = load_stack_dir(tdir)
    else:
        stack = load_stack(images)
        stacks = {tid: stack for tid in gt}
    report, rows = w2s.build_w2s_report(gt, pseudo, student, stacks, k_nn=k_nn)
    dump_json(report.to_dict(), report_path)
    write_csv(
        csv_path,
        ["tile_id", "mask_id", *FEATURE_NAMES, "pseudo_correct", "student_correct"],
        [
            [
                r.tile_id,
                r.mask_id,
                *[f"{v:.6f}" for v in r.features.as_array()],
                int(r.pseudo_correct),
                int(r.student_correct),
            ]
            for r in rows
        ],
    )
    return report.to_dict()


# ---------------------------------------------------------------------------
# Stage: merge
# ---------------------------------------------------------------------------


def stage_merge(
    tiles_root,
    out_path,
    mask_name: str = "filtered",
    dedup_iou: float = 0.5,
) -> AnnotationSet:
    tiles = discover_tiles(tiles_root)
    per_tile = []
    for tid, tdir in tiles.items():
        ti = tiling.TileIndex.from_dict(json.loads((tdir / "tile.json").read_text()))
        aset, _, _ = load_annotation(tdir / f"{mask_name}.json")
        per_tile.append((ti, aset))
    merged = tiling.merge(per_tile, dedup_iou=dedup_iou)
    slide_w = max(ti.origin[0] + ti.extent[0] for ti, _ in per_tile)
    slide_h = max(ti.origin[1] + ti.extent[1] for ti, _ in per_tile)
    dump_json(annotation_to_dict(merged, slide_w, slide_h), out_path)
    return merged


# ---------------------------------------------------------------------------
# run_pipeline
# ---------------------------------------------------------------------------


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute the enabled stages in order, recording durations, input
    hashes, and outputs in the manifest. A stage failure aborts the run but
    still writes the partial manifest (raised as StageError)."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "config": cfg.to_dict(),
        "seeds": {"pipeline": cfg.seed},
        "input_hashes": {},
        "stages": [],
        "status": "running",
    }
    for attr in ("images", "teacher_masks", "gt_masks", "student_masks"):
        v = getattr(cfg, attr)
        if v:
            manifest["input_hashes"][attr] = sha256_path(v)

    tiles_root = out / "tiles"

    def record(name, seconds, outputs):
        manifest["stages"].append(
            {"name": name, "seconds": round(seconds, 3), "outputs": outputs}
        )

    def run_stage(name, fn, outputs):
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            manifest["status"] = f"failed:{name}"
            record(name, time.perf_counter() - t0, outputs)
            dump_json(manifest, out / "manifest.json")
            raise StageError(name, exc) from exc
        record(name, time.perf_counter() - t0, outputs)

    if "dice" in cfg.stages:
        sources = {"teacher": cfg.teacher_masks}
        if cfg.gt_masks:
            sources["gt"] = cfg.gt_masks
        if cfg.student_masks:
            sources["student"] = cfg.student_masks
        run_stage(
            "dice",
            lambda: stage_dice(cfg.images, tiles_root, cfg.tile_size, cfg.overlap, sources),
            ["tiles"],
        )
    if "filter" in cfg.stages:
        run_stage(
            "filter",
            lambda: stage_filter(
                tiles_root, cfg.filter_params(), out / "filter_audit.jsonl",
                workers=cfg.workers,
            ),
            ["tiles/*/filtered.json", "filter_audit.jsonl"],
        )
    if "augment" in cfg.stages:
        run_stage(
            "augment",
            lambda: stage_augment(
                tiles_root, out / "augmented", cfg.augment_params(),
                out / "augment_log.jsonl", workers=cfg.workers,
            ),
            ["augmented", "augment_log.jsonl"],
        )
    if "qa" in cfg.stages:
        run_stage(
            "qa",
            lambda: stage_qa(
                tiles_root, cfg.markers, out / "qa_report.json",
                out / "purity_objects.csv", seed=cfg.seed, workers=cfg.workers,
            ),
            ["qa_report.json", "purity_objects.csv"],
        )
    if "eval" in cfg.stages:
        run_stage(
            "eval",
            lambda: stage_eval(tiles_root, out / "eval.json", out / "eval_tiles.csv"),
            ["eval.json", "eval_tiles.csv"],
        )
    if "w2s" in cfg.stages:
        run_stage(
            "w2s",
            lambda: stage_w2s(
                tiles_root, tiles_root, tiles_root, tiles_root,
                out / "w2s.json", out / "features.csv",
            ),
            ["w2s.json", "features.csv"],
        )
    if "merge" in cfg.stages:
        run_stage(
            "merge",
            lambda: stage_merge(tiles_root, out / "slide_masks.json"),
            ["slide_masks.json"],
        )
    manifest["status"] = "ok"
    dump_json(manifest, out / "manifest.json")
    return manifest
