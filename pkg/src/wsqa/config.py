"""Declarative pipeline configuration: one TOML file with CLI overrides.

Validation never raises on content problems; it returns diagnostics that
name the offending field so the CLI can print them and exit with the
config-error code. The resolved config is embedded in every run manifest.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentParams
from .filtering import FilterParams

ALL_STAGES = ("dice", "filter", "augment", "qa", "eval", "w2s", "merge")


@dataclass
class PipelineConfig:
    images: str = ""
    teacher_masks: str = ""
    gt_masks: str | None = None
    student_masks: str | None = None
    output: str = "out"
    tile_size: int = 512
    overlap: int = 50
    beta1: float = 0.8
    beta2: float = 0.7
    beta3: float = 0.5
    recover_branches: bool = False
    t: int = 3
    max_overlap_ratio: float = 0.5
    opacity_lo: float = 0.5
    opacity_hi: float = 1.0
    border_margin: int = 10
    isolation_radius: int = 5
    markers: list[str] = field(default_factory=list)
    seed: int = 17
    stages: list[str] = field(default_factory=lambda: list(ALL_STAGES))
    workers: int = 0  # 0 = all available cores

    def filter_params(self) -> FilterParams:
        return FilterParams(
            beta1=self.beta1,
            beta2=self.beta2,
            beta3=self.beta3,
            recover_branches=self.recover_branches,
            seed=self.seed,
        )

    def augment_params(self) -> AugmentParams:
        return AugmentParams(
            t=self.t,
            max_overlap_ratio=self.max_overlap_ratio,
            opacity_range=(self.opacity_lo, self.opacity_hi),
            border_margin=self.border_margin,
            isolation_radius=self.isolation_radius,
            rng_seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "paths": {
        "images": "images",
        "teacher_masks": "teacher_masks",
        "gt_masks": "gt_masks",
        "student_masks": "student_masks",
        "output": "output",
    },
    "tiling": {"tile_size": "tile_size", "overlap": "overlap"},
    "filter": {
        "beta1": "beta1",
        "beta2": "beta2",
        "beta3": "beta3",
        "recover_branches": "recover_branches",
    },
    "augment": {
        "t": "t",
        "max_overlap_ratio": "max_overlap_ratio",
        "opacity_lo": "opacity_lo",
        "opacity_hi": "opacity_hi",
        "border_margin": "border_margin",
        "isolation_radius": "isolation_radius",
    },
    "qa": {"markers": "markers"},
    "run": {"seed": "seed", "stages": "stages", "workers": "workers"},
}


def load_config(path, overrides: dict[str, object] | None = None) -> PipelineConfig:
    """Parse the TOML file and apply flat key=value overrides (dotted section
    paths, e.g. filter.beta1)."""
    raw = tomllib.loads(Path(path).read_text())
    cfg = PipelineConfig()
    for section, keys in _SECTIONS.items():
        data = raw.get(section, {})
        for key, attr in keys.items():
            if key in data:
                setattr(cfg, attr, data[key])
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or key not in _SECTIONS[section]:
            raise KeyError(f"unknown config key {dotted!r}")
        attr = _SECTIONS[section][key]
        current = getattr(cfg, attr)
        setattr(cfg, attr, _coerce(value, current))
    return cfg


def _coerce(value, template):
    if isinstance(template, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, list):
        if isinstance(value, list):
            return value
        return [v.strip() for v in str(value).split(",") if v.strip()]
    return value


def config_to_toml(cfg: PipelineConfig) -> str:
    """Render the config back to TOML (for synth fixtures and manifests)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key, attr in keys.items():
            v = getattr(cfg, attr)
            if v is None:
                continue
            lines.append(f"{key} = {fmt(v)}")
        lines.append("")
    return "\n".join(lines)


def validate_config(cfg: PipelineConfig, check_paths: bool = True) -> list[str]:
    """Every violated invariant as a "section.key: problem" diagnostic."""
    issues: list[str] = []
    for name in ("beta1", "beta2", "beta3"):
        v = getattr(cfg, name)
        if not (0.0 < v < 1.0):
            issues.append(f"filter.{name}: must be in (0, 1), got {v}")
    if not (0.0 < cfg.max_overlap_ratio < 1.0):
        issues.append(
            f"augment.max_overlap_ratio: must be in (0, 1), got {cfg.max_overlap_ratio}"
        )
    if not (0.0 < cfg.opacity_lo <= cfg.opacity_hi <= 1.0):
        issues.append(
            "augment.opacity_lo/opacity_hi: need 0 < lo <= hi <= 1, "
            f"got ({cfg.opacity_lo}, {cfg.opacity_hi})"
        )
    if cfg.t < 1:
        issues.append(f"augment.t: must be >= 1, got {cfg.t}")
    if cfg.overlap < 0 or cfg.tile_size <= cfg.overlap:
        issues.append(
            f"tiling: need tile_size > overlap >= 0, got ({cfg.tile_size}, {cfg.overlap})"
        )
    if cfg.seed < 0:
        issues.append(f"run.seed: must be >= 0, got {cfg.seed}")
    if cfg.workers < 0:
        issues.append(f"run.workers: must be >= 0, got {cfg.workers}")
    for s in cfg.stages:
        if s not in ALL_STAGES:
            issues.append(f"run.stages: unknown stage {s!r}")
    if ("qa" in cfg.stages or "w2s" in cfg.stages) and not cfg.markers:
        if "qa" in cfg.stages:
            issues.append("qa.markers: at least one marker channel name required")
    for stage in ("eval", "w2s"):
        if stage in cfg.stages and not cfg.gt_masks:
            issues.append(f"paths.gt_masks: required by enabled stage {stage!r}")
    if "w2s" in cfg.stages and not cfg.student_masks:
        issues.append("paths.student_masks: required by enabled stage 'w2s'")
    if check_paths:
        for attr in ("images", "teacher_masks", "gt_masks", "student_masks"):
            v = getattr(cfg, attr)
            if attr in ("images", "teacher_masks") and not v:
                issues.append(f"paths.{attr}: required")
                continue
            if v and not Path(v).exists():
                issues.append(f"paths.{attr}: {v} does not exist")
    return issues
