"""Experiment configuration: one hierarchical YAML file resolved into the
concrete dataclasses the runner consumes.

Every section is validated against an explicit key set before any compute;
unknown keys are rejected rather than ignored so a typo cannot silently fall
back to a default. Schedule overrides are written at full scale and then
compressed by ``schedule.divisor`` (the desk default is 10), matching how the
compressed schedule itself is defined.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .augment import AugmentError, AugmentationSpec
from .losses import LossWeights
from .nets import NetError, SegmenterConfig
from .synthdata import DomainSpec, clinic_presets
from .trainer import StageSchedule, TrainerError, VARIANTS


class ConfigError(ValueError):
    """Invalid or unknown configuration content; maps to CLI exit code 2."""


_PROFILES = ("desk", "paper")

_AUG_PRESETS = {
    "all": AugmentationSpec.all_ops,
    "geometric": AugmentationSpec.geometric_only,
    "mri": AugmentationSpec.mri_only,
    "none": AugmentationSpec.none,
}

_SCHEDULE_KEYS = ("stage1_epochs", "stage1_milestones", "stage2_warmup_epochs",
                  "stage2_joint_epochs", "stage3_epochs", "stage3_milestones",
                  "lr", "disc_lr", "gamma", "fooled_delta", "batch_size",
                  "guard_window", "ema_decay", "val_every")
_AUG_KEYS = ("rotation_deg", "shear", "scale", "translation", "bias_order",
             "bias_coeff", "motion_events", "motion_rotation", "motion_translation")
_SPEC_KEYS = ("name", "gamma", "noise_sigma", "blur_width", "bias_strength",
              "spacing", "lesion_contrast")


# ---------------------------------------------------------------------------
# resolved settings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkSettings:
    clinic_specs: tuple
    n_subjects: int
    image_size: int
    seed: int

    def clinic_names(self) -> tuple:
        return tuple(s.name for s in self.clinic_specs)


@dataclass(frozen=True)
class PairedSettings:
    """Paired-acquisition experiment: a labeled source clinic plus subjects
    imaged under two acquisition profiles in the same session."""

    source: str
    spec_a: DomainSpec
    spec_b: DomainSpec
    n_subjects: int
    seed: int


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str
    profile: str
    seeds: tuple
    methods: tuple
    benchmark: BenchmarkSettings
    schedule: StageSchedule
    segmenter: SegmenterConfig
    augmentation: AugmentationSpec
    weights: LossWeights
    p_threshold: float
    matrix_pairs: tuple | None = None
    ablation_pairs: tuple | None = None
    paired: PairedSettings | None = None

    def directed_pairs(self) -> tuple:
        """Matrix cells: configured pairs, or every ordered clinic pair."""
        if self.matrix_pairs is not None:
            return self.matrix_pairs
        names = self.benchmark.clinic_names()
        return tuple((a, b) for a in names for b in names if a != b)

    def ablation_directed_pairs(self) -> tuple:
        if self.ablation_pairs is not None:
            return self.ablation_pairs
        return self.directed_pairs()

    def to_dict(self) -> dict:
        d = {
            "output_dir": self.output_dir,
            "profile": self.profile,
            "seeds": list(self.seeds),
            "methods": list(self.methods),
            "benchmark": {
                "clinics": [asdict(s) for s in self.benchmark.clinic_specs],
                "n_subjects": self.benchmark.n_subjects,
                "image_size": self.benchmark.image_size,
                "seed": self.benchmark.seed,
            },
            "schedule": asdict(self.schedule),
            "segmenter": asdict(self.segmenter),
            "augmentation": asdict(self.augmentation),
            "weights": asdict(self.weights),
            "p_threshold": self.p_threshold,
            "matrix_pairs": None if self.matrix_pairs is None
                            else [list(p) for p in self.matrix_pairs],
            "ablation_pairs": None if self.ablation_pairs is None
                              else [list(p) for p in self.ablation_pairs],
            "paired": None if self.paired is None else {
                "source": self.paired.source,
                "spec_a": asdict(self.paired.spec_a),
                "spec_b": asdict(self.paired.spec_b),
                "n_subjects": self.paired.n_subjects,
                "seed": self.paired.seed,
            },
        }
        return json.loads(json.dumps(d))


# ---------------------------------------------------------------------------
# schema walking
# ---------------------------------------------------------------------------

def _require_mapping(value, path: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{path}' must be a mapping, got {type(value).__name__}")
    return value


def _check_keys(mapping: dict, allowed, path: str) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} under '{path}'; "
                          f"allowed: {sorted(allowed)}")


def _scalar(mapping: dict, key: str, kind, default, path: str):
    if key not in mapping or mapping[key] is None:
        return default
    v = mapping[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError(f"'{path}.{key}' must be an integer, got {v!r}")
    if kind is float and not isinstance(v, float):
        raise ConfigError(f"'{path}.{key}' must be a number, got {v!r}")
    if kind is str and not isinstance(v, str):
        raise ConfigError(f"'{path}.{key}' must be a string, got {v!r}")
    return v


def _pairify(value, path: str):
    """Interval fields arrive as YAML lists; dataclasses want tuples."""
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"'{path}' must be a two-element list")
    return tuple(value)


def _domain_spec(entry, presets: dict, path: str) -> DomainSpec:
    if isinstance(entry, str):
        if entry not in presets:
            raise ConfigError(f"'{path}': unknown clinic preset {entry!r}; "
                              f"presets: {sorted(presets)}")
        return presets[entry]
    entry = _require_mapping(entry, path)
    _check_keys(entry, _SPEC_KEYS, path)
    if "name" not in entry:
        raise ConfigError(f"'{path}': inline clinic specs need a 'name'")
    base = presets.get(entry["name"], DomainSpec(entry["name"]))
    fields = {k: v for k, v in entry.items() if k != "name"}
    if "spacing" in fields:
        fields["spacing"] = _pairify(fields["spacing"], f"{path}.spacing")
    try:
        return dataclasses.replace(base, **fields)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"'{path}': {e}") from e


# ---------------------------------------------------------------------------
# section resolvers
# ---------------------------------------------------------------------------

def _resolve_benchmark(section, profile: str, path: str = "benchmark") -> BenchmarkSettings:
    section = _require_mapping(section, path)
    _check_keys(section, ("clinics", "n_subjects", "image_size", "seed"), path)
    presets = clinic_presets()
    entries = section.get("clinics", ["A", "B", "C"])
    if not isinstance(entries, list) or len(entries) < 2:
        raise ConfigError(f"'{path}.clinics' must list at least two clinics")
    specs = tuple(_domain_spec(e, presets, f"{path}.clinics[{i}]")
                  for i, e in enumerate(entries))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"'{path}.clinics' has duplicate names: {names}")
    return BenchmarkSettings(
        clinic_specs=specs,
        n_subjects=_scalar(section, "n_subjects", int, 20, path),
        image_size=_scalar(section, "image_size", int,
                           256 if profile == "paper" else 64, path),
        seed=_scalar(section, "seed", int, 0, path),
    )


def _resolve_schedule(section, profile: str, path: str = "schedule") -> StageSchedule:
    section = _require_mapping(section, path)
    _check_keys(section, _SCHEDULE_KEYS + ("divisor",), path)
    divisor = _scalar(section, "divisor", int, 10 if profile == "desk" else 1, path)
    fields = {k: v for k, v in section.items() if k != "divisor" and v is not None}
    for key in ("stage1_milestones", "stage3_milestones"):
        if key in fields:
            fields[key] = tuple(fields[key])
    try:
        if profile == "desk":
            return StageSchedule.desk(divisor=divisor, **fields)
        return StageSchedule(**fields).scaled(divisor)
    except (TrainerError, TypeError) as e:
        raise ConfigError(f"'{path}': {e}") from e


def _resolve_segmenter(section, profile: str, path: str = "segmenter") -> SegmenterConfig:
    section = _require_mapping(section, path)
    _check_keys(section, ("profile", "depth", "base_filters", "max_filters",
                          "dropout"), path)
    prof = _scalar(section, "profile", str, profile, path)
    builders = {"desk": SegmenterConfig.desk_profile,
                "paper": SegmenterConfig.paper_profile,
                "tiny": SegmenterConfig.tiny_profile}
    if prof not in builders:
        raise ConfigError(f"'{path}.profile' must be one of {sorted(builders)}")
    cfg = builders[prof]()
    fields = {k: v for k, v in section.items() if k != "profile" and v is not None}
    try:
        return dataclasses.replace(cfg, **fields)
    except (NetError, TypeError) as e:
        raise ConfigError(f"'{path}': {e}") from e


def _resolve_augmentation(section, path: str = "augmentation") -> AugmentationSpec:
    section = _require_mapping(section, path)
    _check_keys(section, ("preset",) + _AUG_KEYS, path)
    preset = _scalar(section, "preset", str, "all", path)
    if preset not in _AUG_PRESETS:
        raise ConfigError(f"'{path}.preset' must be one of {sorted(_AUG_PRESETS)}")
    spec = _AUG_PRESETS[preset]()
    fields = {}
    for key in _AUG_KEYS:
        if key in section and section[key] is not None:
            v = section[key]
            fields[key] = v if key == "bias_order" else _pairify(v, f"{path}.{key}")
    try:
        return dataclasses.replace(spec, **fields)
    except (AugmentError, TypeError) as e:
        raise ConfigError(f"'{path}': {e}") from e


def _resolve_weights(section, path: str = "weights") -> LossWeights:
    section = _require_mapping(section, path)
    _check_keys(section, ("alpha", "beta", "epsilon"), path)
    try:
        return LossWeights(
            alpha=_scalar(section, "alpha", float, 0.2, path),
            beta=_scalar(section, "beta", float, 0.3, path),
            epsilon=_scalar(section, "epsilon", float, 1e-5, path),
        )
    except ValueError as e:
        raise ConfigError(f"'{path}': {e}") from e


def _resolve_pairs(section, names, path: str):
    section = _require_mapping(section, path)
    _check_keys(section, ("pairs",), path)
    if "pairs" not in section or section["pairs"] is None:
        return None
    pairs = section["pairs"]
    if not isinstance(pairs, list) or not pairs:
        raise ConfigError(f"'{path}.pairs' must be a nonempty list of [source, target]")
    out = []
    for i, p in enumerate(pairs):
        if not isinstance(p, list) or len(p) != 2:
            raise ConfigError(f"'{path}.pairs[{i}]' must be a [source, target] pair")
        a, b = p
        for n in (a, b):
            if n not in names:
                raise ConfigError(f"'{path}.pairs[{i}]': {n!r} is not a configured "
                                  f"clinic (have {list(names)})")
        if a == b:
            raise ConfigError(f"'{path}.pairs[{i}]': source and target must differ")
        out.append((a, b))
    return tuple(out)


def _resolve_paired(section, bench: BenchmarkSettings, path: str = "paired"):
    if section is None:
        return None
    section = _require_mapping(section, path)
    _check_keys(section, ("source", "clinic_a", "clinic_b", "n_subjects", "seed"), path)
    presets = clinic_presets()
    source = _scalar(section, "source", str, bench.clinic_names()[0], path)
    if source not in bench.clinic_names():
        raise ConfigError(f"'{path}.source' must be a benchmark clinic, got {source!r}")
    if "clinic_a" not in section or "clinic_b" not in section:
        raise ConfigError(f"'{path}' needs 'clinic_a' and 'clinic_b'")
    spec_a = _domain_spec(section["clinic_a"], presets, f"{path}.clinic_a")
    spec_b = _domain_spec(section["clinic_b"], presets, f"{path}.clinic_b")
    if spec_a == spec_b:
        raise ConfigError(f"'{path}': the two acquisition profiles must differ")
    # co-registered acquisitions of one session share a physical grid
    spec_b = dataclasses.replace(spec_b, spacing=spec_a.spacing)
    return PairedSettings(
        source=source, spec_a=spec_a, spec_b=spec_b,
        n_subjects=_scalar(section, "n_subjects", int, bench.n_subjects, path),
        seed=_scalar(section, "seed", int, bench.seed, path),
    )


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

_TOP_KEYS = ("output_dir", "profile", "seeds", "methods", "benchmark", "schedule",
             "segmenter", "augmentation", "weights", "evaluation", "matrix",
             "ablation", "paired")


def config_from_dict(raw: dict, *, paper_profile: bool = False,
                     output_dir=None, seeds=None,
                     p_threshold: float | None = None) -> ExperimentConfig:
    """Resolve a parsed config mapping; keyword overrides mirror CLI flags."""
    raw = _require_mapping(raw, "<config>")
    _check_keys(raw, _TOP_KEYS, "<config>")

    profile = _scalar(raw, "profile", str, "desk", "<config>")
    if profile not in _PROFILES:
        raise ConfigError(f"'profile' must be one of {_PROFILES}, got {profile!r}")
    if paper_profile:
        profile = "paper"

    out = output_dir if output_dir is not None else raw.get("output_dir")
    if not out or not isinstance(out, str):
        raise ConfigError("'output_dir' is required (string path)")

    seed_list = seeds if seeds is not None else raw.get("seeds", [0, 1, 2])
    if (not isinstance(seed_list, (list, tuple)) or not seed_list
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in seed_list)):
        raise ConfigError("'seeds' must be a nonempty list of integers")
    if len(set(seed_list)) != len(seed_list):
        raise ConfigError(f"'seeds' has duplicates: {list(seed_list)}")

    methods = raw.get("methods", ["no_adaptation", "adversarial", "mean_teacher",
                                  "tc", "tc_adversarial"])
    if not isinstance(methods, list) or not methods:
        raise ConfigError("'methods' must be a nonempty list")
    bad = [m for m in methods if m not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; known: {list(VARIANTS)}")
    if len(set(methods)) != len(methods):
        raise ConfigError(f"'methods' has duplicates: {methods}")

    bench = _resolve_benchmark(raw.get("benchmark"), profile)
    evaluation = _require_mapping(raw.get("evaluation"), "evaluation")
    _check_keys(evaluation, ("p_threshold",), "evaluation")
    p_thr = (p_threshold if p_threshold is not None
             else _scalar(evaluation, "p_threshold", float, 0.01, "evaluation"))
    if not 0.0 < p_thr < 1.0:
        raise ConfigError(f"'evaluation.p_threshold' must be in (0, 1), got {p_thr}")

    return ExperimentConfig(
        output_dir=out,
        profile=profile,
        seeds=tuple(seed_list),
        methods=tuple(methods),
        benchmark=bench,
        schedule=_resolve_schedule(raw.get("schedule"), profile),
        segmenter=_resolve_segmenter(raw.get("segmenter"), profile),
        augmentation=_resolve_augmentation(raw.get("augmentation")),
        weights=_resolve_weights(raw.get("weights")),
        p_threshold=p_thr,
        matrix_pairs=_resolve_pairs(raw.get("matrix"), bench.clinic_names(), "matrix"),
        ablation_pairs=_resolve_pairs(raw.get("ablation"), bench.clinic_names(),
                                      "ablation"),
        paired=_resolve_paired(raw.get("paired"), bench),
    )


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"could not parse {path}: {e}") from e
    if raw is None:
        raw = {}
    return config_from_dict(raw, **overrides)


# -- reconstruction of nested dataclasses from persisted bundle dicts --------

def segmenter_from_dict(d: dict) -> SegmenterConfig:
    from .nets import FeatureTap
    fields = dict(d)
    fields["feature_tap"] = FeatureTap(tuple(fields["feature_tap"]["names"]))
    return SegmenterConfig(**fields)


def domain_spec_from_dict(d: dict) -> DomainSpec:
    fields = dict(d)
    fields["spacing"] = tuple(fields["spacing"])
    return DomainSpec(**fields)
