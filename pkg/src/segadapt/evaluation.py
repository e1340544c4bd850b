"""Segmentation metrics (Dice, HD95, volume difference, recall), the paired
Wilcoxon signed-rank test, and the per-metric significance ranking used to
compare methods.

Empty-mask policy (the silent corner cases that otherwise corrupt rankings):
Dice of two empty masks is 1 (perfect agreement on absence); HD95 is
undefined (None) when either mask is empty; VD and recall are undefined when
the ground truth is empty; VD of an empty prediction against nonempty truth
is 1. Undefined values are dropped pairwise per metric during ranking and
the drop counts are reported.

HD95 uses boundaries (foreground pixels with at least one background
4-neighbor, image border counting as background), symmetric pooled directed
distances in millimeters, and the linear-interpolation percentile rule.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm

from .core import BinMask

METRICS = ("dice", "hd95_mm", "vd", "recall")
HIGHER_BETTER = {"dice": True, "hd95_mm": False, "vd": False, "recall": True}


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float
    hd95_mm: float | None
    vd: float | None
    recall: float | None

    def value(self, metric: str):
        return getattr(self, metric)


# ---------------------------------------------------------------------------
# per-case metrics
# ---------------------------------------------------------------------------

def _check_shapes(a: BinMask, b: BinMask) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice_score(a: BinMask, b: BinMask) -> float:
    _check_shapes(a, b)
    na, nb = int(a.labels.sum()), int(b.labels.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int((a.labels & b.labels).sum())
    return 2.0 * inter / (na + nb)


def boundary_points(mask: BinMask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor; pixels on
    the image border count as boundary."""
    lab = mask.labels.astype(bool)
    padded = np.pad(lab, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(lab & ~interior)


def hd95(a: BinMask, b: BinMask, spacing=(1.0, 1.0)) -> float | None:
    """95th percentile of the pooled directed boundary distances, in mm.
    None when either mask is empty."""
    _check_shapes(a, b)
    if a.labels.sum() == 0 or b.labels.sum() == 0:
        return None
    sp = np.asarray(spacing, dtype=np.float64)
    pa = boundary_points(a) * sp
    pb = boundary_points(b) * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return _percentile_linear(np.concatenate([d_ab, d_ba]), 95.0)


def _percentile_linear(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics, s[lo] + frac*(s[hi]-s[lo]).
    Pinned explicitly: np.percentile switches to a two-sided lerp formula for
    fractional indices >= 0.5, which perturbs the last bit."""
    s = np.sort(values)
    idx = (len(s) - 1) * q / 100.0
    lo = math.floor(idx)
    if lo + 1 >= len(s):
        return float(s[lo])
    frac = idx - lo
    return float(s[lo] + frac * (s[lo + 1] - s[lo]))


def volume_difference(pred: BinMask, gt: BinMask, spacing=(1.0, 1.0)) -> float | None:
    _check_shapes(pred, gt)
    pixel_area = float(spacing[0]) * float(spacing[1])
    v_gt = int(gt.labels.sum()) * pixel_area
    if v_gt == 0:
        return None
    v_pred = int(pred.labels.sum()) * pixel_area
    return abs(v_pred - v_gt) / v_gt


def recall(pred: BinMask, gt: BinMask) -> float | None:
    _check_shapes(pred, gt)
    n_gt = int(gt.labels.sum())
    if n_gt == 0:
        return None
    tp = int((pred.labels & gt.labels).sum())
    return tp / n_gt


def evaluate_case(case_id: str, pred: BinMask, gt: BinMask,
                  spacing=(1.0, 1.0)) -> CaseMetrics:
    return CaseMetrics(
        case_id=case_id,
        dice=dice_score(pred, gt),
        hd95_mm=hd95(pred, gt, spacing),
        vd=volume_difference(pred, gt, spacing),
        recall=recall(pred, gt),
    )


# ---------------------------------------------------------------------------
# paired Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def _signed_rank_stats(diffs: np.ndarray) -> tuple[float, float, float]:
    """(W+, W-, two-sided p). Zero differences are dropped first; |d| ties
    get midranks. Exact distribution (dynamic program over doubled ranks,
    equivalent to enumerating all 2^n sign assignments) for n <= 25, normal
    approximation with tie correction above."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 0.0, 0.0, 1.0
    absd = np.abs(d)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(n)
    sorted_abs = absd[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i: j + 1]] = (i + j) / 2 + 1  # midrank, 1-based
        i = j + 1
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())

    if n <= 25:
        # doubled midranks are integers; count subsets by doubled-rank sum
        doubled = np.rint(2 * ranks).astype(int)
        total = int(doubled.sum())
        counts = np.zeros(total + 1, dtype=np.float64)
        counts[0] = 1.0
        for dr in doubled:
            # new[w] = old[w] + old[w - dr]; RHS must see pre-update values
            counts[dr:] = counts[dr:] + counts[: total + 1 - dr]
        dw = int(round(2 * w_plus))
        lo, hi = min(dw, total - dw), max(dw, total - dw)
        p = (counts[: lo + 1].sum() + counts[hi:].sum()) / 2.0 ** n
    else:
        _, tie_counts = np.unique(sorted_abs, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(
            ((tie_counts ** 3 - tie_counts)).sum()) / 48.0
        z = (w_plus - mean) / math.sqrt(var)
        p = 2.0 * float(norm.sf(abs(z)))
    return w_plus, w_minus, min(1.0, p)


def wilcoxon_signed_rank(x, y) -> float:
    """Two-sided p-value of the paired signed-rank test on x - y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length 1D paired samples")
    d = x - y
    n_nonzero = int((d != 0).sum())
    if n_nonzero == 0:
        return 1.0
    if n_nonzero < 5:
        raise ValueError(f"need >= 5 nonzero differences, got {n_nonzero}")
    return _signed_rank_stats(d)[2]


# ---------------------------------------------------------------------------
# significance ranking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankTable:
    methods: tuple
    metrics: tuple
    ranks: np.ndarray  # (n_methods, n_metrics)
    p_threshold: float
    insufficient_pairs: tuple = ()

    def __post_init__(self):
        r = np.asarray(self.ranks, dtype=np.float64)
        if (r < 1).any() or (r > len(self.methods)).any():
            raise ValueError("ranks must lie in [1, n_methods]")
        r.setflags(write=False)
        object.__setattr__(self, "ranks", r)

    def final_rank(self, method: str) -> float:
        return float(self.ranks[self.methods.index(method)].mean())

    def final_ranks(self) -> dict:
        return {m: self.final_rank(m) for m in self.methods}

    def best_method(self) -> str:
        finals = self.final_ranks()
        return min(finals, key=finals.get)


def significance_ranking(per_case: dict, p_threshold: float = 0.01,
                         metrics: tuple = METRICS) -> RankTable:
    """per_case maps method name -> list of CaseMetrics. Per metric, a
    method's rank is 1 + the number of methods whose paired Wilcoxon beats it
    at p < p_threshold in the favorable direction; pairs with fewer than 5
    usable nonzero-difference cases count as non-significant and are logged."""
    methods = tuple(per_case)
    if len(methods) < 2:
        raise ValueError("ranking needs at least two methods")
    values = {
        m: {metric: {c.case_id: c.value(metric) for c in cases
                     if c.value(metric) is not None}
            for metric in metrics}
        for m, cases in per_case.items()
    }
    ranks = np.ones((len(methods), len(metrics)))
    insufficient = []
    for k, metric in enumerate(metrics):
        sign = 1.0 if HIGHER_BETTER[metric] else -1.0
        for i, mi in enumerate(methods):
            beaten_by = 0
            for mj in methods:
                if mj == mi:
                    continue
                vi, vj = values[mi][metric], values[mj][metric]
                common = sorted(vi.keys() & vj.keys())
                d = sign * np.array([vj[c] - vi[c] for c in common])
                if len(common) < 5 or int((d != 0).sum()) < 5:
                    insufficient.append((metric, mi, mj, len(common)))
                    continue
                w_plus, w_minus, p = _signed_rank_stats(d)
                if p < p_threshold and w_plus > w_minus:
                    beaten_by += 1
            ranks[i, k] = 1 + beaten_by
    return RankTable(methods=methods, metrics=tuple(metrics), ranks=ranks,
                     p_threshold=p_threshold,
                     insufficient_pairs=tuple(insufficient))


def aggregate_final_ranks(tables) -> dict:
    """Mean of final ranks over experiments (methods must match)."""
    tables = list(tables)
    methods = tables[0].methods
    for t in tables:
        if t.methods != methods:
            raise ValueError("rank tables aggregate over identical method sets")
    return {m: float(np.mean([t.final_rank(m) for t in tables])) for m in methods}


# ---------------------------------------------------------------------------
# CSV round trips
# ---------------------------------------------------------------------------

def write_case_metrics_csv(path, cases) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("case_id",) + METRICS)
        for c in cases:
            w.writerow([c.case_id] + ["" if c.value(m) is None else repr(c.value(m))
                                      for m in METRICS])


def read_case_metrics_csv(path) -> list:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            vals = {m: (None if row[m] == "" else float(row[m])) for m in METRICS}
            out.append(CaseMetrics(case_id=row["case_id"], **vals))
    return out


def write_rank_table_csv(path, table: RankTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("method",) + table.metrics + ("final_rank",))
        for i, m in enumerate(table.methods):
            w.writerow([m] + [repr(v) for v in table.ranks[i]] + [repr(table.final_rank(m))])
