"""Bootstrap confidence intervals, subgroup analysis and report rendering."""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_DOWN, Decimal
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import metrics as M
from .metrics import AbsentClassWarning, UndefinedMetricError


@dataclass(frozen=True)
class EvalInput:
    """Per-encounter outcomes for one (sub)task.

    ``scores`` is P(positive) of shape (n,) for binary tasks and a (n, C)
    probability matrix for multiclass ones.
    """

    labels: np.ndarray
    preds: np.ndarray
    num_classes: int
    scores: np.ndarray | None = None
    sex: tuple[str, ...] | None = None
    race: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "preds", np.asarray(self.preds, dtype=np.int64))
        n = self.labels.shape[0]
        if self.preds.shape != (n,):
            raise ValueError("labels and preds must have equal length")
        if self.scores is not None:
            s = np.asarray(self.scores, dtype=np.float64)
            if s.shape[0] != n:
                raise ValueError("scores must have one row per encounter")
            if np.any((s < 0) | (s > 1)):
                raise ValueError("scores must lie in [0, 1]")
            object.__setattr__(self, "scores", s)
        for name in ("sex", "race"):
            v = getattr(self, name)
            if v is not None:
                if len(v) != n:
                    raise ValueError(f"{name} must have one entry per encounter")
                object.__setattr__(self, name, tuple(v))

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx) -> "EvalInput":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda t: None if t is None else tuple(t[i] for i in idx)  # noqa: E731
        return EvalInput(self.labels[idx], self.preds[idx], self.num_classes,
                         None if self.scores is None else self.scores[idx], pick(self.sex), pick(self.race))


MetricFn = Callable[[EvalInput], float]

METRICS: dict[str, MetricFn] = {
    "macro_f1": lambda e: M.macro_f1(e.labels, e.preds, e.num_classes),
    "micro_f1": lambda e: M.micro_f1(e.labels, e.preds, e.num_classes),
    "accuracy": lambda e: M.accuracy(e.labels, e.preds),
    "f1": lambda e: M.f1_binary(e.labels, e.preds),
    "auroc": lambda e: M.auroc(e.labels, e.scores),
    "aupr": lambda e: M.aupr(e.labels, e.scores),
    "macro_auroc": lambda e: M.macro_auroc(e.labels, e.scores, e.num_classes),
}

DEFAULT_METRICS = {
    "binary": ("auroc", "aupr", "f1"),
    "multiclass": ("macro_f1", "micro_f1", "macro_auroc"),
}


def _metric(metric: str | MetricFn) -> MetricFn:
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise KeyError(f"unknown metric {metric!r}; known: {sorted(METRICS)}") from None


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 1000
    ci_level: float = 0.95
    seed: int = 0
    max_redraws: int = 1000
    workers: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")


class RedrawBudgetExhausted(RuntimeError):
    pass


def replicate_rng(seed: int, replicate: int, attempt: int) -> np.random.Generator:
    """Counter-based stream: depends only on (seed, replicate, attempt)."""
    return np.random.default_rng([seed, replicate, attempt])


@dataclass
class BootstrapResult:
    point: float
    lo: float
    hi: float
    values: np.ndarray
    redraws: int


def _one_replicate(inputs: EvalInput, fn: MetricFn, seed: int, r: int, max_redraws: int) -> tuple[float, int]:
    n = len(inputs)
    for attempt in range(max_redraws + 1):
        idx = replicate_rng(seed, r, attempt).integers(0, n, size=n)
        try:
            return fn(inputs.take(idx)), attempt
        except UndefinedMetricError:
            continue
    raise RedrawBudgetExhausted(f"replicate {r}: metric undefined after {max_redraws} redraws")


def bootstrap_ci(inputs: EvalInput, metric: str | MetricFn, cfg: BootstrapConfig = BootstrapConfig()) -> BootstrapResult:
    """Percentile bootstrap over encounters.

    Resamples on which the metric is undefined (e.g. a single class for
    AUROC) are redrawn; ``redraws`` counts them across all replicates.
    """
    fn = _metric(metric)
    point = fn(inputs)  # raises if undefined on the full sample
    work = lambda r: _one_replicate(inputs, fn, cfg.seed, r, cfg.max_redraws)  # noqa: E731
    # resamples routinely miss a rare class; the point estimate above already warned
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AbsentClassWarning)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                out = list(pool.map(work, range(cfg.replicates)))
        else:
            out = [work(r) for r in range(cfg.replicates)]
    values = np.array([v for v, _ in out])
    alpha = (1 - cfg.ci_level) / 2
    lo, hi = np.quantile(values, [alpha, 1 - alpha])
    return BootstrapResult(float(point), float(lo), float(hi), values, sum(a for _, a in out))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; zero-variance differences give (0.0, 1.0).

    A spread at rounding-noise level counts as zero variance.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2:
        return 0.0, 1.0
    sd = d.std(ddof=1)
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        return 0.0, 1.0
    t = d.mean() / (sd / math.sqrt(n))
    return float(t), float(2 * stats.t.sf(abs(t), n - 1))


# -- reports -------------------------------------------------------------------

@dataclass
class Estimate:
    point: float | None
    lo: float | None
    hi: float | None
    redraws: int = 0

    def cell(self) -> str:
        return format_cell(self.point, self.lo, self.hi)


@dataclass
class SignificanceResult:
    axis: str
    metric: str
    group_a: str
    group_b: str
    t: float | None
    p: float | None
    replicates: int
    skipped: str | None = None


@dataclass
class MetricReport:
    n: int
    metrics: dict[str, Estimate] = field(default_factory=dict)
    subgroups: dict[str, "MetricReport"] = field(default_factory=dict)
    significance: list[SignificanceResult] = field(default_factory=list)
    flags: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "metrics": {k: vars(v) for k, v in self.metrics.items()},
            "subgroups": {k: v.to_dict() for k, v in self.subgroups.items()},
            "significance": [vars(s) for s in self.significance],
            "flags": dict(self.flags),
        }


def evaluate(inputs: EvalInput, metric_names: Sequence[str], cfg: BootstrapConfig) -> tuple[MetricReport, dict]:
    report = MetricReport(len(inputs))
    boots = {}
    for name in metric_names:
        b = bootstrap_ci(inputs, name, cfg)
        boots[name] = b
        report.metrics[name] = Estimate(b.point, b.lo, b.hi, b.redraws)
    return report, boots


def binarize_race(race: str) -> str | None:
    r = (race or "").strip().lower()
    if not r or r in ("unknown", "other/unknown", "declined", "not reported"):
        return None
    return "white" if r in ("white", "caucasian") else "non-white"


AXES: dict[str, tuple[Callable[[EvalInput], Sequence[str | None]], tuple[str, str]]] = {
    "sex": (lambda e: [s if s in ("female", "male") else None for s in e.sex], ("female", "male")),
    "race": (lambda e: [binarize_race(r) for r in e.race], ("non-white", "white")),
}


def subgroup_report(inputs: EvalInput, metric_names: Sequence[str], cfg: BootstrapConfig,
                    axes: Sequence[str] = ("sex", "race"), min_size: int = 30) -> MetricReport:
    """Overall and per-subgroup estimates plus paired t-tests between the two groups of each axis.

    Pairing is by bootstrap replicate index: both groups are resampled with
    the same (seed, replicate) streams and their replicate metric values are
    differenced. Groups smaller than ``min_size`` are flagged and left out of
    the tests.
    """
    report, _ = evaluate(inputs, metric_names, cfg)
    for axis in axes:
        if axis not in AXES:
            raise ValueError(f"unknown subgroup axis {axis!r}")
        assign, groups = AXES[axis]
        if (inputs.sex if axis == "sex" else inputs.race) is None:
            raise ValueError(f"demographic field for axis {axis!r} missing")
        membership = assign(inputs)
        group_boots = {}
        small = []
        for g in groups:
            idx = [i for i, m in enumerate(membership) if m == g]
            key = f"{axis}={g}"
            if not idx:
                raise ValueError(f"subgroup {key} is empty")
            sub = inputs.take(idx)
            sub_report = MetricReport(len(idx))
            boots = {}
            for name in metric_names:
                try:
                    b = bootstrap_ci(sub, name, cfg)
                except (UndefinedMetricError, RedrawBudgetExhausted) as exc:
                    sub_report.metrics[name] = Estimate(None, None, None)
                    sub_report.flags[name] = f"undefined: {exc}"
                    continue
                boots[name] = b
                sub_report.metrics[name] = Estimate(b.point, b.lo, b.hi, b.redraws)
            if len(idx) < min_size:
                small.append(g)
                report.flags[key] = f"small subgroup (n={len(idx)} < {min_size}); excluded from significance tests"
            report.subgroups[key] = sub_report
            group_boots[g] = boots
        a, b = groups
        for name in metric_names:
            if small:
                report.significance.append(SignificanceResult(axis, name, a, b, None, None, 0,
                                                              skipped=f"small subgroup(s): {', '.join(small)}"))
                continue
            if name not in group_boots[a] or name not in group_boots[b]:
                report.significance.append(SignificanceResult(axis, name, a, b, None, None, 0,
                                                              skipped="metric undefined in a subgroup"))
                continue
            t, p = paired_t_test(group_boots[a][name].values, group_boots[b][name].values)
            report.significance.append(SignificanceResult(axis, name, a, b, t, p, cfg.replicates))
    return report


def format_value(x: float | None) -> str:
    """Three decimals from the shortest decimal form; exact ties round down (0.8615 -> 0.861)."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_DOWN))


def format_cell(point, lo, hi) -> str:
    """``0.834 (0.806,0.861)``: three decimals, no space inside the parentheses."""
    if point is None:
        return "-"
    if lo is None and hi is None:
        return format_value(point)
    return f"{format_value(point)} ({format_value(lo)},{format_value(hi)})"


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned columns separated by two spaces."""
    table = [list(header)] + [list(r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    return "\n".join(lines) + "\n"


def results_table(rows: Mapping[str, Mapping[str, Estimate]], columns: Sequence[str], corner: str = "") -> str:
    """Model-by-metric table: one row per model, one "point (lo,hi)" cell per metric."""
    body = [[name] + [cells[c].cell() if c in cells else "-" for c in columns] for name, cells in rows.items()]
    return render_table([corner] + list(columns), body)


def render_text(report: MetricReport, title: str = "Overall") -> str:
    out = [f"{title} (n={report.n})", render_table(["metric", "value"],
                                                   [[k, v.cell()] for k, v in report.metrics.items()])]
    if report.subgroups:
        names = list(report.metrics)
        rows = [[g, str(r.n)] + [r.metrics[m].cell() if m in r.metrics else "-" for m in names]
                for g, r in report.subgroups.items()]
        out += ["Subgroups", render_table(["subgroup", "n"] + names, rows)]
    if report.significance:
        rows = [[s.axis, s.metric, f"{s.group_a} vs {s.group_b}",
                 "-" if s.t is None else f"{s.t:.3f}", "-" if s.p is None else f"{s.p:.3f}", s.skipped or ""]
                for s in report.significance]
        out += ["Paired t-tests over bootstrap replicates", render_table(["axis", "metric", "groups", "t", "p", "note"], rows)]
    if report.flags:
        out += ["Flags", render_table(["item", "note"], [[k, v] for k, v in report.flags.items()])]
    return "\n".join(out)


def render_report(report: MetricReport | Mapping[str, MetricReport], fmt: str = "text") -> str:
    reports = report if isinstance(report, Mapping) else {"Overall": report}
    if fmt == "json":
        return json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=1, sort_keys=True) + "\n"
    if fmt == "text":
        return "\n".join(render_text(r, k) for k, r in reports.items())
    raise ValueError(f"unknown report format {fmt!r}")


def write_report(report: MetricReport | Mapping[str, MetricReport], out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    j, t = out / "report.json", out / "report.txt"
    j.write_text(render_report(report, "json"), encoding="utf-8")
    t.write_text(render_report(report, "text"), encoding="utf-8")
    return j, t
