"""Config-driven experiment orchestration: directed source->target matrices,
augmentation ablations, and paired-acquisition experiments.

Everything lands under ``config.output_dir``::

    config.json                      resolved config snapshot
    benchmark/                       rendered clinics (+ paired_a/, paired_b/)
    runs/<exp>/<method>/seed<k>/     one cell: manifest, metrics, checkpoints,
                                     target_metrics.csv, source_metrics.csv
    tables/<exp>/seed<k>_target_ranks.csv
    bundle.json                      cell ledger

A cell is committed by atomically renaming its staging directory into place,
so the bundle directory doubles as the resume ledger: a rerun skips every
cell whose manifest matches the identity the config implies and retrains
nothing. Failed cells are recorded and the rest of the matrix continues.
"""

from __future__ import annotations

import dataclasses
import json
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationSpec
from .config import ConfigError, ExperimentConfig
from .core import (Image2D, DatasetSplit, SeededRng, UnlabeledSample, binarize,
                   load_sample, make_splits, save_sample)
from .evaluation import (evaluate_case, read_case_metrics_csv,
                         significance_ranking, write_case_metrics_csv,
                         write_rank_table_csv)
from .nets import UNet, load_checkpoint
from .synthdata import (SOURCE_FRACTIONS, TARGET_FRACTIONS, Benchmark,
                        build_benchmark, build_paired_set, load_benchmark,
                        save_benchmark)
from .trainer import RunManifest, train_method, _split_ids

TARGET_CSV = "target_metrics.csv"
SOURCE_CSV = "source_metrics.csv"

# operator sets for the four consistency-augmentation arms
ABLATION_ARMS = (("tc_all", ("geometric", "bias", "motion")),
                 ("tc_geo", ("geometric",)),
                 ("tc_mri", ("bias", "motion")),
                 ("tc_noaug", ()))

# arm key, trainer variant, operator set (None = the configured spec),
# augment the labeled stage-1 batches
PAIRED_ARMS = (
    ("tc_adversarial", "tc_adversarial", None, False),
    ("tc", "tc", None, False),
    ("tc_noaug", "tc", (), False),
    ("mean_teacher", "mean_teacher", None, False),
    ("no_adaptation_aug", "no_adaptation", None, True),
    ("no_adaptation", "no_adaptation", (), False),
    ("adversarial_aug", "adversarial", None, True),
    ("adversarial", "adversarial", (), False),
)


class RunnerError(RuntimeError):
    pass


def _canon(obj):
    return json.loads(json.dumps(obj))


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


# ---------------------------------------------------------------------------
# bundle model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentRecord:
    name: str      # display, e.g. "A->B"
    key: str       # path component, e.g. "A2B"
    source: str
    target: str | None

    def to_dict(self) -> dict:
        return {"name": self.name, "key": self.key,
                "source": self.source, "target": self.target}


@dataclass
class CellResult:
    experiment: str
    method: str
    seed: int
    run_dir: str
    status: str
    degenerate: bool
    error: str | None = None
    cached: bool = False  # in-memory only; a resumed bundle must serialize identically

    def record(self) -> dict:
        return {"experiment": self.experiment, "method": self.method,
                "seed": self.seed, "run_dir": self.run_dir,
                "status": self.status, "degenerate": self.degenerate,
                "error": self.error}


@dataclass
class ResultsBundle:
    root: Path
    kind: str
    experiments: tuple
    methods: tuple
    seeds: tuple
    p_threshold: float
    cells: list
    config: dict

    def cell(self, experiment: str, method: str, seed: int) -> CellResult | None:
        for c in self.cells:
            if (c.experiment, c.method, c.seed) == (experiment, method, seed):
                return c
        return None

    def experiment(self, name: str) -> ExperimentRecord:
        for e in self.experiments:
            if e.name == name:
                return e
        raise KeyError(name)

    def any_failed(self) -> bool:
        return any(c.status != "ok" for c in self.cells)

    def any_degenerate(self) -> bool:
        return any(c.degenerate for c in self.cells)

    def case_csv(self, cell: CellResult, side: str) -> Path:
        return self.root / cell.run_dir / (TARGET_CSV if side == "target" else SOURCE_CSV)

    def rank_csv(self, experiment: ExperimentRecord, seed: int) -> Path:
        return self.root / "tables" / experiment.key / f"seed{seed}_target_ranks.csv"

    def to_dict(self) -> dict:
        return _canon({
            "kind": self.kind,
            "p_threshold": self.p_threshold,
            "seeds": list(self.seeds),
            "methods": list(self.methods),
            "experiments": [e.to_dict() for e in self.experiments],
            "cells": [c.record() for c in self.cells],
            "config": self.config,
        })

    def save(self) -> None:
        _atomic_write_text(self.root / "bundle.json",
                           json.dumps(self.to_dict(), sort_keys=True, indent=1))


def load_bundle(root) -> ResultsBundle:
    root = Path(root)
    path = root / "bundle.json"
    if not path.exists():
        raise RunnerError(f"no bundle.json under {root}")
    d = json.loads(path.read_text())
    return ResultsBundle(
        root=root, kind=d["kind"],
        experiments=tuple(ExperimentRecord(**e) for e in d["experiments"]),
        methods=tuple(d["methods"]), seeds=tuple(d["seeds"]),
        p_threshold=d["p_threshold"],
        cells=[CellResult(**c) for c in d["cells"]],
        config=d["config"])


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def _benchmark_settings(config: ExperimentConfig) -> dict:
    return _canon({"clinics": [asdict(s) for s in config.benchmark.clinic_specs],
                   "n_subjects": config.benchmark.n_subjects,
                   "image_size": config.benchmark.image_size,
                   "seed": config.benchmark.seed})


def ensure_benchmark(config: ExperimentConfig, root: Path) -> Benchmark:
    """Generate (or reload) the clinic benchmark under ``root``/benchmark.
    The settings file doubles as the completion marker; a directory built
    from different settings is refused rather than silently reused."""
    bdir = root / "benchmark"
    settings = _benchmark_settings(config)
    marker = bdir / "settings.json"
    if marker.exists():
        if json.loads(marker.read_text()) != settings:
            raise ConfigError(f"{bdir} holds a benchmark generated from different "
                              "settings; point output_dir somewhere fresh")
        return load_benchmark(bdir)
    bench = build_benchmark(
        config.benchmark.n_subjects, config.benchmark.clinic_specs,
        split_policy={s.name: SOURCE_FRACTIONS for s in config.benchmark.clinic_specs},
        seed=config.benchmark.seed, image_size=config.benchmark.image_size)
    save_benchmark(bench, bdir)
    _atomic_write_text(marker, json.dumps(settings, sort_keys=True, indent=1))
    return bench


def role_splits(bench: Benchmark) -> dict:
    """Per clinic: the labeled source-protocol split (50/25/25) plus a
    target-protocol re-split (50/0/50) of the same subjects, so any clinic
    can take either side of a directed pair."""
    out = {}
    for name, clinic in bench.clinics.items():
        samples = sorted(clinic.split.train + clinic.split.val + clinic.split.test,
                         key=lambda s: s.sample_id)
        tgt = make_splits(samples, TARGET_FRACTIONS,
                          SeededRng(bench.seed).child(f"role:target:{name}"))
        out[name] = {"source": clinic.split, "target": tgt}
    return out


def _paired_settings(config: ExperimentConfig) -> dict:
    p = config.paired
    return _canon({"source": p.source, "spec_a": asdict(p.spec_a),
                   "spec_b": asdict(p.spec_b), "n_subjects": p.n_subjects,
                   "seed": p.seed, "image_size": config.benchmark.image_size})


def ensure_paired_data(config: ExperimentConfig, root: Path):
    """Render (or reload) the two-acquisition set. Returns (pairs, train_ids,
    test_ids, session_domain): pairs are (acq A, acq B) LabeledSample tuples
    sharing one anatomy."""
    if config.paired is None:
        raise ConfigError("this experiment needs a 'paired' config section")
    p = config.paired
    session_domain = len(config.benchmark.clinic_specs)
    bdir = root / "benchmark"
    marker = bdir / "paired_settings.json"
    settings = _paired_settings(config)
    if marker.exists():
        saved = json.loads(marker.read_text())
        if {k: saved[k] for k in settings} != settings:
            raise ConfigError(f"{bdir} holds paired data generated from different "
                              "settings; point output_dir somewhere fresh")
        pairs = [(load_sample(bdir / "paired_a", sid), load_sample(bdir / "paired_b", sid))
                 for sid in saved["train_ids"] + saved["test_ids"]]
        by_id = {a.sample_id: (a, b) for a, b in pairs}
        return ([by_id[s] for s in saved["train_ids"] + saved["test_ids"]],
                list(saved["train_ids"]), list(saved["test_ids"]), session_domain)
    pairs = build_paired_set(p.n_subjects, p.spec_a, p.spec_b, seed=p.seed,
                             image_size=config.benchmark.image_size,
                             domain_ids=(session_domain, session_domain + 1))
    ids = [a.sample_id for a, _ in pairs]
    split = make_splits(ids, TARGET_FRACTIONS, SeededRng(p.seed).child("paired:roles"))
    for a, b in pairs:
        save_sample(bdir / "paired_a", a)
        save_sample(bdir / "paired_b", b)
    settings["train_ids"] = list(split.train)
    settings["test_ids"] = list(split.test)
    _atomic_write_text(marker, json.dumps(settings, sort_keys=True, indent=1))
    return pairs, list(split.train), list(split.test), session_domain


def paired_target_split(pairs, train_ids, test_ids, session_domain: int) -> DatasetSplit:
    """Trainer-facing view of the paired set. Both acquisitions carry the
    same session domain label toward the discriminator; alternating which
    acquisition plays the image role keeps the two sequences equally
    represented in target batches."""
    by_id = {a.sample_id: (a, b) for a, b in pairs}

    def as_unlabeled(i: int, sid: str) -> UnlabeledSample:
        a, b = by_id[sid]
        first, second = (a, b) if i % 2 == 0 else (b, a)
        image = Image2D(first.image.pixels, first.image.spacing, session_domain)
        partner = Image2D(second.image.pixels, second.image.spacing, session_domain + 1)
        return UnlabeledSample(image=image, partner=partner, sample_id=sid)

    train = tuple(as_unlabeled(i, sid) for i, sid in enumerate(train_ids))
    test = tuple(as_unlabeled(i, sid) for i, sid in enumerate(test_ids))
    return DatasetSplit(train=train, val=(), test=test, fractions=TARGET_FRACTIONS)


# ---------------------------------------------------------------------------
# prediction and per-cell evaluation
# ---------------------------------------------------------------------------

def predict_probs(f: UNet, images, chunk: int = 8) -> np.ndarray:
    f.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            batch = torch.from_numpy(
                np.stack([im.pixels for im in images[i:i + chunk]])[:, None])
            probs, _ = f(batch)
            out.append(probs[:, 0].numpy())
    return np.concatenate(out)


def evaluate_samples(f: UNet, samples, threshold: float = 0.5) -> list:
    probs = predict_probs(f, [s.image for s in samples])
    return [evaluate_case(s.sample_id, binarize(probs[i], threshold), s.mask,
                          s.image.spacing)
            for i, s in enumerate(samples)]


def evaluate_agreement(f: UNet, pairs, threshold: float = 0.5) -> list:
    """Between-acquisition agreement: metrics of the prediction on acquisition
    A against the prediction on acquisition B (reference), never against the
    ground truth."""
    probs_a = predict_probs(f, [a.image for a, _ in pairs])
    probs_b = predict_probs(f, [b.image for _, b in pairs])
    return [evaluate_case(a.sample_id, binarize(probs_a[i], threshold),
                          binarize(probs_b[i], threshold), a.image.spacing)
            for i, (a, _) in enumerate(pairs)]


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellPlan:
    experiment: str
    method: str
    seed: int
    variant: str
    spec: AugmentationSpec
    source_augment: bool
    paired: bool
    source_split: DatasetSplit
    target_split: DatasetSplit
    eval_target: tuple   # samples (matrix/ablation) or (a, b) pairs (paired)
    eval_source: tuple
    rel_dir: str


def _expected_identity(config: ExperimentConfig, plan: CellPlan) -> dict:
    return _canon({
        "variant": plan.variant, "seed": plan.seed, "paired": plan.paired,
        "source_augment": plan.source_augment,
        "segmenter": asdict(config.segmenter),
        "schedule": asdict(config.schedule),
        "weights": asdict(config.weights),
        "augmentation": asdict(plan.spec),
        "data": {"source": _split_ids(plan.source_split),
                 "target": _split_ids(plan.target_split)},
    })


_CELL_FILES = ("final.npz", "metrics.jsonl", TARGET_CSV, SOURCE_CSV)


def _cached_manifest(cell_dir: Path, expected: dict) -> RunManifest | None:
    try:
        manifest = RunManifest.load(cell_dir / "manifest.json")
    except (OSError, json.JSONDecodeError, TypeError, KeyError):
        return None
    got = _canon({k: getattr(manifest, k) for k in expected})
    if got != expected:
        return None
    if not all((cell_dir / f).exists() for f in _CELL_FILES):
        return None
    return manifest


def run_cell(config: ExperimentConfig, plan: CellPlan, root: Path) -> CellResult:
    """Train and evaluate one cell, staging into a temp directory that is
    renamed into place on success (the atomic commit the resume logic keys
    on). A matching completed cell short-circuits to a cached result."""
    cell_dir = root / plan.rel_dir
    expected = _expected_identity(config, plan)
    manifest = _cached_manifest(cell_dir, expected)
    if manifest is not None:
        return CellResult(plan.experiment, plan.method, plan.seed, plan.rel_dir,
                          "ok", manifest.degenerate, cached=True)

    tmp = cell_dir.with_name(cell_dir.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    if cell_dir.exists():
        shutil.rmtree(cell_dir)
    tmp.parent.mkdir(parents=True, exist_ok=True)

    net, manifest = train_method(
        plan.variant, plan.source_split, plan.target_split, config.schedule,
        plan.spec, config.weights, plan.seed, seg_config=config.segmenter,
        paired=plan.paired, source_augment=plan.source_augment, out_dir=tmp)
    if plan.paired:
        target_cases = evaluate_agreement(net, plan.eval_target)
    else:
        target_cases = evaluate_samples(net, plan.eval_target)
    write_case_metrics_csv(tmp / TARGET_CSV, target_cases)
    write_case_metrics_csv(tmp / SOURCE_CSV, evaluate_samples(net, plan.eval_source))
    os.replace(tmp, cell_dir)
    return CellResult(plan.experiment, plan.method, plan.seed, plan.rel_dir,
                      "ok", manifest.degenerate, cached=False)


def _arm_spec(base: AugmentationSpec, ops) -> AugmentationSpec:
    return base if ops is None else dataclasses.replace(base, enabled=ops)


def _execute(config: ExperimentConfig, kind: str, experiments, methods,
             plans) -> ResultsBundle:
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(root / "config.json",
                       json.dumps(config.to_dict(), sort_keys=True, indent=1))
    cells = []
    for plan in plans:
        try:
            cells.append(run_cell(config, plan, root))
        except Exception as e:  # a failed cell must not sink the rest of the matrix
            cells.append(CellResult(plan.experiment, plan.method, plan.seed,
                                    plan.rel_dir, "failed", False,
                                    error=f"{type(e).__name__}: {e}"))
    bundle = ResultsBundle(root=root, kind=kind, experiments=tuple(experiments),
                           methods=tuple(methods), seeds=config.seeds,
                           p_threshold=config.p_threshold, cells=cells,
                           config=config.to_dict())
    write_rank_tables(bundle)
    bundle.save()
    return bundle


def write_rank_tables(bundle: ResultsBundle) -> None:
    """Per (experiment, seed): significance ranking over the methods whose
    cell completed, persisted as CSV. Fewer than two completed methods leave
    no table to write."""
    for exp in bundle.experiments:
        for seed in bundle.seeds:
            per_case = {}
            for method in bundle.methods:
                cell = bundle.cell(exp.name, method, seed)
                if cell is not None and cell.status == "ok":
                    per_case[method] = read_case_metrics_csv(
                        bundle.case_csv(cell, "target"))
            if len(per_case) >= 2:
                table = significance_ranking(per_case, bundle.p_threshold)
                write_rank_table_csv(bundle.rank_csv(exp, seed), table)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _matrix_experiments(pairs) -> tuple:
    return tuple(ExperimentRecord(name=f"{a}->{b}", key=f"{_safe(a)}2{_safe(b)}",
                                  source=a, target=b) for a, b in pairs)


def run_matrix(config: ExperimentConfig) -> ResultsBundle:
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    bench = ensure_benchmark(config, root)
    roles = role_splits(bench)
    experiments = _matrix_experiments(config.directed_pairs())
    plans = []
    for exp in experiments:
        src, tgt = roles[exp.source], roles[exp.target]
        for method in config.methods:
            for seed in config.seeds:
                plans.append(CellPlan(
                    experiment=exp.name, method=method, seed=seed, variant=method,
                    spec=config.augmentation, source_augment=False, paired=False,
                    source_split=src["source"], target_split=tgt["target"],
                    eval_target=tuple(tgt["target"].test),
                    eval_source=tuple(src["source"].test),
                    rel_dir=f"runs/{exp.key}/{method}/seed{seed}"))
    return _execute(config, "matrix", experiments, config.methods, plans)


def run_ablation(config: ExperimentConfig) -> ResultsBundle:
    """Consistency training only, across the four augmentation arms."""
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    bench = ensure_benchmark(config, root)
    roles = role_splits(bench)
    experiments = _matrix_experiments(config.ablation_directed_pairs())
    arm_keys = tuple(k for k, _ in ABLATION_ARMS)
    plans = []
    for exp in experiments:
        src, tgt = roles[exp.source], roles[exp.target]
        for arm, ops in ABLATION_ARMS:
            for seed in config.seeds:
                plans.append(CellPlan(
                    experiment=exp.name, method=arm, seed=seed, variant="tc",
                    spec=_arm_spec(config.augmentation, ops),
                    source_augment=False, paired=False,
                    source_split=src["source"], target_split=tgt["target"],
                    eval_target=tuple(tgt["target"].test),
                    eval_source=tuple(src["source"].test),
                    rel_dir=f"runs/{exp.key}/{arm}/seed{seed}"))
    return _execute(config, "ablation", experiments, arm_keys, plans)


def run_paired(config: ExperimentConfig) -> ResultsBundle:
    """Eight arms on the two-acquisition set; the primary target metric is
    between-acquisition agreement of the predictions."""
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    bench = ensure_benchmark(config, root)
    roles = role_splits(bench)
    pairs, train_ids, test_ids, session_domain = ensure_paired_data(config, root)
    target_split = paired_target_split(pairs, train_ids, test_ids, session_domain)
    by_id = {a.sample_id: (a, b) for a, b in pairs}
    eval_pairs = tuple(by_id[sid] for sid in test_ids)
    source_split = roles[config.paired.source]["source"]
    exp = ExperimentRecord(name="paired", key="paired",
                           source=config.paired.source, target=None)
    arm_keys = tuple(k for k, _, _, _ in PAIRED_ARMS)
    plans = []
    for arm, variant, ops, source_augment in PAIRED_ARMS:
        for seed in config.seeds:
            plans.append(CellPlan(
                experiment=exp.name, method=arm, seed=seed, variant=variant,
                spec=_arm_spec(config.augmentation, ops),
                source_augment=source_augment, paired=True,
                source_split=source_split, target_split=target_split,
                eval_target=eval_pairs, eval_source=tuple(source_split.test),
                rel_dir=f"runs/paired/{arm}/seed{seed}"))
    return _execute(config, "paired", (exp,), arm_keys, plans)


# ---------------------------------------------------------------------------
# single-cell entry points (CLI train / evaluate)
# ---------------------------------------------------------------------------

def run_single_cell(config: ExperimentConfig, source: str, target: str,
                    method: str, seed: int) -> CellResult:
    names = config.benchmark.clinic_names()
    for n in (source, target):
        if n not in names:
            raise ConfigError(f"{n!r} is not a configured clinic (have {list(names)})")
    if source == target:
        raise ConfigError("source and target must differ")
    if method not in config.methods:
        raise ConfigError(f"{method!r} is not in the configured methods "
                          f"{list(config.methods)}")
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    bench = ensure_benchmark(config, root)
    roles = role_splits(bench)
    exp = _matrix_experiments(((source, target),))[0]
    plan = CellPlan(
        experiment=exp.name, method=method, seed=seed, variant=method,
        spec=config.augmentation, source_augment=False, paired=False,
        source_split=roles[source]["source"], target_split=roles[target]["target"],
        eval_target=tuple(roles[target]["target"].test),
        eval_source=tuple(roles[source]["source"].test),
        rel_dir=f"runs/{exp.key}/{method}/seed{seed}")
    return run_cell(config, plan, root)


def reevaluate(config: ExperimentConfig, run_dir, source: str, target: str) -> dict:
    """Recompute both CaseMetrics CSVs of a completed cell from its final
    checkpoint; returns the median target/source dice for a quick look."""
    run_dir = Path(run_dir)
    if not (run_dir / "final.npz").exists():
        raise RunnerError(f"{run_dir} has no final.npz checkpoint")
    root = Path(config.output_dir)
    bench = ensure_benchmark(config, root)
    roles = role_splits(bench)
    net = UNet(config.segmenter)
    load_checkpoint(run_dir / "final.npz", net)
    target_cases = evaluate_samples(net, tuple(roles[target]["target"].test))
    source_cases = evaluate_samples(net, tuple(roles[source]["source"].test))
    write_case_metrics_csv(run_dir / TARGET_CSV, target_cases)
    write_case_metrics_csv(run_dir / SOURCE_CSV, source_cases)
    return {"target_median_dice": float(np.median([c.dice for c in target_cases])),
            "source_median_dice": float(np.median([c.dice for c in source_cases]))}
