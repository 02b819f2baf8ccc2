"""Command-line interface.

Subcommands: tile, filter, augment, qa, eval, w2s, merge, run, losses,
synth. Exit codes: 0 success, 2 configuration/validation error, 3 stage
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import _kernels, modelmath, pipeline, synth
from .augment import AugmentParams
from .config import ALL_STAGES, PipelineConfig, config_to_toml, load_config, validate_config
from .filtering import FilterParams
from .raster import dump_json, load_annotation, save_annotation
from .storage import save_stack_tiff

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_tile(sub):
    p = sub.add_parser("tile", help="dice a slide raster into tile directories")
    p.add_argument("--images", required=True, help="slide TIFF or per-channel directory")
    p.add_argument("--out", required=True, help="output tiles directory")
    p.add_argument("--masks", help="slide-frame teacher mask JSON to dice alongside")
    p.add_argument("--gt", help="slide-frame ground-truth mask JSON")
    p.add_argument("--student", help="slide-frame student mask JSON")
    p.add_argument("--tile-size", type=int, default=512)
    p.add_argument("--overlap", type=int, default=50)


def _add_filter(sub):
    p = sub.add_parser("filter", help="rule-based curation of weak-teacher masks")
    p.add_argument("--masks", required=True, help="tiles root (or dir of per-tile JSON)")
    p.add_argument("--images", required=True, help="tiles root with per-channel rasters")
    p.add_argument("--beta1", type=float, default=0.8)
    p.add_argument("--beta2", type=float, default=0.7)
    p.add_argument("--beta3", type=float, default=0.5)
    p.add_argument("--recover-branches", action="store_true")
    p.add_argument("--mask-name", default="teacher", help="mask JSON stem inside tile dirs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory for the audit log")


def _add_augment(sub):
    p = sub.add_parser("augment", help="copy-paste overlap augmentation")
    p.add_argument("--masks", required=True, help="tiles root holding filtered.json")
    p.add_argument("--images", required=True, help="tiles root with rasters")
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--max-overlap", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)


def _add_qa(sub):
    p = sub.add_parser("qa", help="coverage / purity / cell-count report")
    p.add_argument("--masks", required=True, help="tiles root holding mask JSONs")
    p.add_argument("--images", required=True, help="tiles root with rasters")
    p.add_argument("--markers", required=True, help="comma-separated marker channel names")
    p.add_argument("--mask-name", default="filtered")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="report JSON path")


def _add_eval(sub):
    p = sub.add_parser("eval", help="AJI+ / PQ against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth mask JSON")
    p.add_argument("--pred", required=True, help="predicted mask JSON")
    p.add_argument("--out", required=True, help="report JSON path")


def _add_w2s(sub):
    p = sub.add_parser("w2s", help="weak-to-strong generalization diagnostics")
    p.add_argument("--gt", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", required=True, help="per-nucleus feature CSV path")
    p.add_argument("--knn", type=int, default=5)


def _add_merge(sub):
    p = sub.add_parser("merge", help="merge per-tile masks into slide coordinates")
    p.add_argument("--masks", required=True, help="tiles root")
    p.add_argument("--mask-name", default="filtered")
    p.add_argument("--dedup-iou", type=float, default=0.5)
    p.add_argument("--out", required=True, help="slide mask JSON path")


def _add_run(sub):
    p = sub.add_parser("run", help="run the configured pipeline end to end")
    p.add_argument("--config", required=True, help="pipeline TOML file")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value",
    )


def _add_losses(sub):
    p = sub.add_parser("losses", help="numeric kernel self-tests")
    p.add_argument("--selftest", action="store_true", required=True)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic fixture slide")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--nuclei", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pseudo-error", type=float, default=0.2)
    p.add_argument("--student-error", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wsqa",
        description="weak-teacher mask curation, augmentation and QA for multiplex WSIs",
    )
    parser.add_argument(
        "--version", action="version", version=f"wsqa 0.1.0 (kernels: {_kernels.BACKEND})"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (
        _add_tile, _add_filter, _add_augment, _add_qa, _add_eval,
        _add_w2s, _add_merge, _add_run, _add_losses, _add_synth,
    ):
        add(sub)
    return parser


def _cmd_tile(args) -> int:
    sources = {}
    if args.masks:
        sources["teacher"] = args.masks
    if args.gt:
        sources["gt"] = args.gt
    if args.student:
        sources["student"] = args.student
    ids = pipeline.stage_dice(
        args.images, Path(args.out), args.tile_size, args.overlap, sources
    )
    print(f"wrote {len(ids)} tiles to {args.out}")
    return EXIT_OK


def _cmd_filter(args) -> int:
    try:
        params = FilterParams(
            beta1=args.beta1,
            beta2=args.beta2,
            beta3=args.beta3,
            recover_branches=args.recover_branches,
            seed=args.seed,
        )
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    removed = pipeline.stage_filter(
        args.masks, params, out / "filter_audit.jsonl",
        mask_name=args.mask_name, workers=args.workers,
    )
    print(f"filtered tiles under {args.masks}; removed {removed} masks")
    return EXIT_OK


def _cmd_augment(args) -> int:
    try:
        params = AugmentParams(t=args.t, max_overlap_ratio=args.max_overlap, rng_seed=args.seed)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pasted = pipeline.stage_augment(
        args.masks, out, params, out / "augment_log.jsonl", workers=args.workers
    )
    print(f"augmented tiles written to {args.out}; {pasted} pastes")
    return EXIT_OK


def _cmd_qa(args) -> int:
    markers = [m.strip() for m in args.markers.split(",") if m.strip()]
    if not markers:
        print("config error: --markers must name at least one channel", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    csv_path = out.with_suffix(".csv") if out.suffix else out / "purity_objects.csv"
    report = pipeline.stage_qa(
        args.masks, markers, out, csv_path,
        mask_name=args.mask_name, seed=args.seed, workers=args.workers,
    )
    print(
        f"coverage={report['coverage_gamma']:.4f} "
        f"purity={report['purity']['global_pi']} cells={report['cell_count']}"
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    gt, _, _ = load_annotation(args.gt)
    pred, _, _ = load_annotation(args.pred)
    report = pipeline.evaluate_sets(gt, pred)
    dump_json(report, args.out)
    print(f"AJI+={report['aji_plus']:.4f} PQ={report['pq']:.4f}")
    return EXIT_OK


def _cmd_w2s(args) -> int:
    report = pipeline.stage_w2s(
        args.gt, args.pseudo, args.student, args.images,
        args.out, args.features, k_nn=args.knn,
    )
    print(
        f"alpha={report['alpha_i']:.4f} err(f,y)={report['err_student_vs_gt']:.4f} "
        f"bound={report['bound']}"
    )
    return EXIT_OK


def _cmd_merge(args) -> int:
    merged = pipeline.stage_merge(
        args.masks, args.out, mask_name=args.mask_name, dedup_iou=args.dedup_iou
    )
    print(f"merged {len(merged)} instances into {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    overrides = {}
    for item in args.set:
        key, _, value = item.partition("=")
        if not value:
            print(f"config error: --set expects SECTION.KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        overrides[key.strip()] = value.strip()
    try:
        cfg = load_config(args.config, overrides)
    except (OSError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    issues = validate_config(cfg)
    if issues:
        for issue in issues:
            print(f"config error: {issue}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = pipeline.run_pipeline(cfg)
    except pipeline.StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"pipeline ok: {len(manifest['stages'])} stages, output in {cfg.output}")
    return EXIT_OK


def _cmd_losses(args) -> int:
    results = modelmath.gradient_selftest(n_cases=args.cases, seed=args.seed)
    width = max(len(name) for name, _, _ in results)
    print(f"{'kernel'.ljust(width)}  max rel err  status")
    ok = True
    for name, err, passed in results:
        ok &= passed
        print(f"{name.ljust(width)}  {err:11.3e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_STAGE


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = synth.SynthParams(
        width=args.width,
        height=args.height,
        n_nuclei=args.nuclei,
        seed=args.seed,
        pseudo_error_rate=args.pseudo_error,
        student_error_rate=args.student_error,
    )
    res = synth.generate(params)
    save_stack_tiff(out / "slide.tif", res.slide)
    W, H = res.slide.width, res.slide.height
    save_annotation(out / "gt.json", res.gt, W, H)
    save_annotation(out / "teacher.json", res.teacher, W, H)
    save_annotation(out / "pseudo.json", res.pseudo, W, H)
    save_annotation(out / "student.json", res.student, W, H)
    dump_json(res.planted, out / "planted.json")

    cfg = PipelineConfig(
        images=str(out / "slide.tif"),
        teacher_masks=str(out / "teacher.json"),
        gt_masks=str(out / "gt.json"),
        student_masks=str(out / "student.json"),
        output=str(out / "run"),
        markers=list(params.marker_names),
        seed=args.seed,
        stages=list(ALL_STAGES),
        workers=0,
    )
    (out / "config.toml").write_text(config_to_toml(cfg))
    print(f"fixture written to {out}: {len(res.gt)} nuclei, config.toml ready for `wsqa run`")
    return EXIT_OK


_COMMANDS = {
    "tile": _cmd_tile,
    "filter": _cmd_filter,
    "augment": _cmd_augment,
    "qa": _cmd_qa,
    "eval": _cmd_eval,
    "w2s": _cmd_w2s,
    "merge": _cmd_merge,
    "run": _cmd_run,
    "losses": _cmd_losses,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except pipeline.StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
