"""Report rendering and table verification.

The report is generated exclusively from persisted bundle artifacts (case
CSVs, rank CSVs, manifests, metrics logs, checkpoints), so regenerating it
from the same bundle is byte-identical. Every number placed in a rendered
table is also appended to ``report_cells.json``; ``verify_bundle`` recomputes
each of those cells from the CaseMetrics files and re-derives the persisted
rank tables, reporting any mismatch.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .core import binarize, load_sample  # noqa: E402
from .config import segmenter_from_dict  # noqa: E402
from .evaluation import (METRICS, _percentile_linear, read_case_metrics_csv,  # noqa: E402
                         significance_ranking, write_rank_table_csv)
from .nets import UNet, load_checkpoint  # noqa: E402
from .runner import ResultsBundle, load_benchmark, predict_probs, role_splits  # noqa: E402

LABELS = {
    "no_adaptation": "No adaptation",
    "adversarial": "Adversarial",
    "mean_teacher": "Mean teacher",
    "tc": "TC",
    "tc_adversarial": "TC & adversarial",
    "supervised_upper": "Supervised (upper bound)",
    "tc_all": "TC + all-aug",
    "tc_geo": "TC Geo",
    "tc_mri": "TC + MRI-aug",
    "tc_noaug": "TC No-aug",
    "no_adaptation_aug": "No adaptation + aug",
    "adversarial_aug": "Adversarial + aug",
}

_TARGET_HEADS = {"matrix": ("Dice", "HD95 (mm)", "VD", "Recall"),
                 "ablation": ("Dice", "HD95 (mm)", "VD", "Recall"),
                 "paired": ("Agr Dice", "Agr HD95 (mm)", "Agr VD", "Agr Recall")}
_SOURCE_METRICS = ("dice", "hd95_mm")

_CURVE_KEYS = ("sup", "cons", "adv", "total", "val_dice", "disc", "accuracy")


def format_median_iqr(values) -> str:
    """Median with the interquartile range in parentheses, e.g. 0.7572(0.10);
    quantiles use the same order-statistic interpolation as hd95."""
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if len(vals) == 0:
        return "n/a"
    med = _percentile_linear(vals, 50.0)
    iqr = _percentile_linear(vals, 75.0) - _percentile_linear(vals, 25.0)
    return f"{med:.4f}({iqr:.2f})"


# ---------------------------------------------------------------------------
# shared cell computation (report writes these, verify recomputes them)
# ---------------------------------------------------------------------------

def table_methods(bundle: ResultsBundle, exp_name: str) -> list:
    """Methods tabulated for an experiment: completed under every seed, in
    configured order (ranking needs one roster across seeds)."""
    out = []
    for method in bundle.methods:
        cells = [bundle.cell(exp_name, method, s) for s in bundle.seeds]
        if all(c is not None and c.status == "ok" for c in cells):
            out.append(method)
    return out


def pooled_values(bundle: ResultsBundle, exp_name: str, method: str,
                  side: str, metric: str) -> list:
    vals = []
    for seed in bundle.seeds:
        cell = bundle.cell(exp_name, method, seed)
        for case in read_case_metrics_csv(bundle.case_csv(cell, side)):
            v = case.value(metric)
            if v is not None:
                vals.append(v)
    return vals


def per_seed_rank_tables(bundle: ResultsBundle, exp_name: str, methods) -> list:
    tables = []
    for seed in bundle.seeds:
        per_case = {m: read_case_metrics_csv(
            bundle.case_csv(bundle.cell(exp_name, m, seed), "target"))
            for m in methods}
        tables.append(significance_ranking(per_case, bundle.p_threshold))
    return tables


def mean_final_ranks(tables, methods) -> dict:
    return {m: float(np.mean([t.final_rank(m) for t in tables])) for m in methods}


def mean_metric_ranks(tables, methods) -> dict:
    """method -> per-metric rank averaged over seeds, keyed by metric."""
    out = {}
    for m in methods:
        out[m] = {metric: float(np.mean(
            [t.ranks[t.methods.index(m), k] for t in tables]))
            for k, metric in enumerate(METRICS)}
    return out


def guard_text(bundle: ResultsBundle, exp_name: str, method: str) -> str:
    return "tripped" if any(
        bundle.cell(exp_name, method, s).degenerate for s in bundle.seeds) else "ok"


def compute_cell_text(bundle: ResultsBundle, exp_name: str, method: str,
                      column: str) -> str:
    """Single source of truth for every rendered table number."""
    if column == "guard":
        return guard_text(bundle, exp_name, method)
    methods = table_methods(bundle, exp_name)
    if column == "rank":
        if len(methods) < 2 or method not in methods:
            return "n/a"
        tables = per_seed_rank_tables(bundle, exp_name, methods)
        return f"{mean_final_ranks(tables, methods)[method]:.3f}"
    side, metric = column.split(":")
    return format_median_iqr(pooled_values(bundle, exp_name, method, side, metric))


# ---------------------------------------------------------------------------
# report generation
# ---------------------------------------------------------------------------

@dataclass
class ReportResult:
    root: Path
    tables: int
    cells: list
    warnings: list = field(default_factory=list)
    plots: list = field(default_factory=list)


def _columns(kind: str) -> list:
    cols = [(f"target:{m}", h) for m, h in zip(METRICS, _TARGET_HEADS[kind])]
    cols += [(f"source:{m}", f"Src {h}") for m, h in
             zip(_SOURCE_METRICS, ("Dice", "HD95 (mm)"))]
    return cols + [("rank", "Rank"), ("guard", "Guard")]


def _experiment_table(bundle: ResultsBundle, exp, records: list) -> list:
    """Markdown lines for one experiment; appends cell records as it goes."""
    methods = table_methods(bundle, exp.name)
    lines = [f"## {exp.name}", ""]
    partial = [m for m in bundle.methods if m not in methods]
    if partial:
        lines += [f"Not tabulated (incomplete across seeds): "
                  f"{', '.join(partial)}.", ""]
    if len(methods) < 2:
        lines += ["Fewer than two methods completed; no table.", ""]
        return lines

    tables = per_seed_rank_tables(bundle, exp.name, methods)
    finals = mean_final_ranks(tables, methods)
    per_metric = mean_metric_ranks(tables, methods)
    best_by_metric = {metric: min(per_metric[m][metric] for m in methods)
                      for metric in METRICS}
    best_final = min(finals.values())
    order = sorted(methods, key=lambda m: (finals[m], bundle.methods.index(m)))

    cols = _columns(bundle.kind)
    lines.append("| Method | " + " | ".join(h for _, h in cols) + " |")
    lines.append("|" + "---|" * (len(cols) + 1))
    for method in order:
        row = [LABELS.get(method, method)]
        for column, _ in cols:
            text = compute_cell_text(bundle, exp.name, method, column)
            records.append({"table": exp.name, "row": method,
                            "column": column, "text": text})
            bold = False
            if column.startswith("target:"):
                metric = column.split(":")[1]
                bold = per_metric[method][metric] == best_by_metric[metric]
            elif column == "rank":
                bold = finals[method] == best_final
            row.append(f"**{text}**" if bold else text)
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    return lines


def _plot_curves(run_dir: Path, out_png: Path) -> None:
    rows = [json.loads(line) for line in
            (run_dir / "metrics.jsonl").read_text().splitlines() if line]
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    x = np.arange(1, len(rows) + 1)
    for key in _CURVE_KEYS:
        ys = [(i, r[key]) for i, r in enumerate(rows) if key in r]
        if ys:
            ax.plot([x[i] for i, _ in ys], [v for _, v in ys], label=key, lw=1.2)
    boundaries = [i for i in range(1, len(rows))
                  if rows[i]["stage"] != rows[i - 1]["stage"]]
    for b in boundaries:
        ax.axvline(b + 0.5, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("epoch (stages concatenated)")
    ax.set_ylabel("loss / metric")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png)
    plt.close(fig)


def _load_net(bundle: ResultsBundle, cell) -> UNet:
    net = UNet(segmenter_from_dict(bundle.config["segmenter"]))
    load_checkpoint(bundle.root / cell.run_dir / "final.npz", net)
    return net


def _panel(images, truths, preds_by_method, out_png: Path) -> None:
    """Rows: example cases. Columns: input, truth, one per method."""
    methods = list(preds_by_method)
    n_rows, n_cols = len(images), 2 + len(methods)
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(1.6 * n_cols, 1.6 * n_rows), dpi=100,
                             squeeze=False)
    titles = ["image", "truth"] + [LABELS.get(m, m) for m in methods]
    for r in range(n_rows):
        panels = [images[r], truths[r]] + [preds_by_method[m][r] for m in methods]
        for c, (ax, arr) in enumerate(zip(axes[r], panels)):
            ax.imshow(arr, cmap="gray", interpolation="nearest")
            ax.set_axis_off()
            if r == 0:
                ax.set_title(titles[c], fontsize=7)
    fig.tight_layout()
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png)
    plt.close(fig)


def _qualitative_examples(bundle: ResultsBundle, exp, methods, report_dir: Path,
                          n_cases: int = 3):
    """Side-by-side predictions of each tabulated method (first seed)."""
    seed = bundle.seeds[0]
    nets = {m: _load_net(bundle, bundle.cell(exp.name, m, seed)) for m in methods}
    bench_dir = bundle.root / "benchmark"
    out_png = report_dir / "plots" / f"{exp.key}_examples.png"
    if bundle.kind == "paired":
        saved = json.loads((bench_dir / "paired_settings.json").read_text())
        sid = saved["test_ids"][0]
        a = load_sample(bench_dir / "paired_a", sid)
        b = load_sample(bench_dir / "paired_b", sid)
        samples = [a, b]
    else:
        roles = role_splits(load_benchmark(bench_dir))
        samples = list(roles[exp.target]["target"].test[:n_cases])
    images = [s.image.pixels for s in samples]
    truths = [s.mask.labels for s in samples]
    preds = {m: [binarize(p, 0.5).labels
                 for p in predict_probs(nets[m], [s.image for s in samples])]
             for m in methods}
    _panel(images, truths, preds, out_png)
    return out_png


def make_report(bundle: ResultsBundle) -> ReportResult:
    report_dir = bundle.root / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    result = ReportResult(root=report_dir, tables=0, cells=[])

    lines = ["# Experiment report", "",
             f"Kind: {bundle.kind}. Seeds: {list(bundle.seeds)}. "
             f"Ranking threshold: p < {bundle.p_threshold}.", ""]
    ok_cells = [c for c in bundle.cells if c.status == "ok"]
    failed = [c for c in bundle.cells if c.status != "ok"]

    if not ok_cells:
        msg = "bundle contains no completed cells; nothing to tabulate"
        result.warnings.append(msg)
        lines += [f"**Warning:** {msg}.", ""]
    else:
        for exp in bundle.experiments:
            table_lines = _experiment_table(bundle, exp, result.cells)
            if any(line.startswith("| Method |") for line in table_lines):
                result.tables += 1
            lines += table_lines

    if failed:
        lines.append("## Failed cells")
        lines.append("")
        for c in failed:
            lines.append(f"- {c.experiment} / {c.method} / seed {c.seed}: {c.error}")
        lines.append("")

    for c in ok_cells:
        exp = bundle.experiment(c.experiment)
        png = report_dir / "plots" / f"{exp.key}_{c.method}_seed{c.seed}_curves.png"
        _plot_curves(bundle.root / c.run_dir, png)
        result.plots.append(png)
    for exp in bundle.experiments:
        methods = table_methods(bundle, exp.name)
        if methods:
            result.plots.append(
                _qualitative_examples(bundle, exp, methods, report_dir))

    (report_dir / "report.md").write_text("\n".join(lines))
    (report_dir / "report_cells.json").write_text(
        json.dumps(result.cells, sort_keys=True, indent=1))
    return result


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def verify_bundle(bundle: ResultsBundle) -> list:
    """Recompute every rendered table number from the persisted CaseMetrics
    and re-derive every persisted rank CSV; returns mismatch descriptions
    (empty meaning the bundle's tables are fully traceable)."""
    mismatches = []
    report_dir = bundle.root / "report"
    cells_path = report_dir / "report_cells.json"
    if not cells_path.exists():
        return [f"missing {cells_path.relative_to(bundle.root)}; "
                "generate the report first"]
    records = json.loads(cells_path.read_text())
    report_md = (report_dir / "report.md").read_text() \
        if (report_dir / "report.md").exists() else ""

    for rec in records:
        try:
            fresh = compute_cell_text(bundle, rec["table"], rec["row"],
                                      rec["column"])
        except Exception as e:
            mismatches.append(f"{rec['table']}/{rec['row']}/{rec['column']}: "
                              f"recomputation failed: {e}")
            continue
        if fresh != rec["text"]:
            mismatches.append(f"{rec['table']}/{rec['row']}/{rec['column']}: "
                              f"report says {rec['text']!r}, data says {fresh!r}")
        elif rec["text"] not in report_md:
            mismatches.append(f"{rec['table']}/{rec['row']}/{rec['column']}: "
                              f"value {rec['text']!r} not present in report.md")

    # persisted rank tables must equal a fresh ranking of the case CSVs
    expected_paths = set()
    for exp in bundle.experiments:
        for seed in bundle.seeds:
            per_case = {}
            for method in bundle.methods:
                cell = bundle.cell(exp.name, method, seed)
                if cell is not None and cell.status == "ok":
                    per_case[method] = read_case_metrics_csv(
                        bundle.case_csv(cell, "target"))
            csv_path = bundle.rank_csv(exp, seed)
            if len(per_case) < 2:
                continue
            expected_paths.add(csv_path)
            if not csv_path.exists():
                mismatches.append(f"missing rank table "
                                  f"{csv_path.relative_to(bundle.root)}")
                continue
            table = significance_ranking(per_case, bundle.p_threshold)
            with tempfile.TemporaryDirectory() as td:
                fresh_path = Path(td) / "fresh.csv"
                write_rank_table_csv(fresh_path, table)
                if fresh_path.read_bytes() != csv_path.read_bytes():
                    mismatches.append(f"rank table "
                                      f"{csv_path.relative_to(bundle.root)} does "
                                      "not match a fresh ranking of the case CSVs")
    for stray in sorted((bundle.root / "tables").glob("**/*.csv")):
        if stray not in expected_paths:
            mismatches.append(f"unexpected table file "
                              f"{stray.relative_to(bundle.root)}")
    return mismatches
