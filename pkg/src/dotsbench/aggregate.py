"""Batch aggregation and paired run comparison.

Aggregation follows the three-view convention: flat averages over all
processed cases, per-category averages, and category-balanced averages
where every category gets one vote. Step counts are aggregated as totals,
per-run means and the count of cases whose mean leaves the soft band.

Cases from the ErrorTests category and Technical-scoped cases never enter
clinical aggregates; they are listed under ``excluded``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import EmptyBatch, EmptyIntersection
from .scoring import ALL_METRICS, BINARY_METRICS, CONTINUOUS_METRICS, STEP_BAND, DotsRecord
from .stats import McNemarResult, MeanEffect, WilcoxonResult, mcnemar, mean_effect_ci, wilcoxon_signed_rank

# Case-level binary metrics are means over runs; a case counts as passing
# when the majority of its runs passed.
BINARY_PASS_THRESHOLD = 50.0

HISTOGRAM_BIN_WIDTH = 10.0
HISTOGRAM_RANGE = (-100.0, 100.0)


@dataclass
class ScoredRun:
    """One run's metric vector plus the case metadata aggregation needs."""

    case_id: str
    category: str
    dots: DotsRecord
    expected_steps: int
    scopes: tuple[str, ...] = ()

    def is_clinical(self) -> bool:
        return self.category != "ErrorTests" and "Technical" not in self.scopes


@dataclass
class CaseAggregate:
    case_id: str
    category: str
    num_runs: int
    metrics: dict[str, float]
    mean_steps: float
    total_steps: int
    expected_steps: int
    outside_band: bool


@dataclass
class BatchReport:
    average: dict[str, float]
    per_category: dict[str, dict[str, float]]
    balanced: dict[str, float]
    total_steps: int
    average_steps: float
    outside_band_count: int
    cases: dict[str, CaseAggregate]
    excluded: list[str] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["cases"] = {k: asdict(v) for k, v in self.cases.items()}
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "BatchReport":
        cases = {k: CaseAggregate(**v) for k, v in obj["cases"].items()}
        rest = {k: v for k, v in obj.items() if k != "cases"}
        return cls(cases=cases, **rest)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BatchReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def aggregate_batch(runs: list[ScoredRun], manifest: dict | None = None) -> BatchReport:
    """Collapse runs to case-level means, then to the three aggregate views."""
    if not runs:
        raise EmptyBatch("no runs to aggregate")
    clinical = [r for r in runs if r.is_clinical()]
    excluded = sorted({r.case_id for r in runs if not r.is_clinical()})
    if not clinical:
        raise EmptyBatch("no clinical runs to aggregate (all excluded)")

    by_case: dict[str, list[ScoredRun]] = {}
    for r in clinical:
        by_case.setdefault(r.case_id, []).append(r)

    cases: dict[str, CaseAggregate] = {}
    for case_id, case_runs in sorted(by_case.items()):
        metrics = {
            m: _mean([getattr(r.dots, m) for r in case_runs]) for m in ALL_METRICS
        }
        steps = [r.dots.steps for r in case_runs]
        mean_steps = _mean([float(s) for s in steps])
        expected = case_runs[0].expected_steps
        lo = (1.0 - STEP_BAND) * expected
        hi = (1.0 + STEP_BAND) * expected
        cases[case_id] = CaseAggregate(
            case_id=case_id,
            category=case_runs[0].category,
            num_runs=len(case_runs),
            metrics=metrics,
            mean_steps=mean_steps,
            total_steps=sum(steps),
            expected_steps=expected,
            outside_band=not (lo <= mean_steps <= hi),
        )

    average = {m: _mean([c.metrics[m] for c in cases.values()]) for m in ALL_METRICS}
    categories: dict[str, list[CaseAggregate]] = {}
    for c in cases.values():
        categories.setdefault(c.category, []).append(c)
    per_category = {
        cat: {m: _mean([c.metrics[m] for c in group]) for m in ALL_METRICS}
        for cat, group in sorted(categories.items())
    }
    balanced = {
        m: _mean([per_category[cat][m] for cat in per_category]) for m in ALL_METRICS
    }
    total_steps = sum(c.total_steps for c in cases.values())
    total_run_count = sum(c.num_runs for c in cases.values())
    return BatchReport(
        average=average,
        per_category=per_category,
        balanced=balanced,
        total_steps=total_steps,
        average_steps=total_steps / max(1, total_run_count),
        outside_band_count=sum(1 for c in cases.values() if c.outside_band),
        cases=cases,
        excluded=excluded,
        manifest=manifest or {},
    )


# ---------------------------------------------------------------------------
# Paired comparison

@dataclass
class MetricComparison:
    metric: str
    deltas: dict[str, float]            # case id -> new - old
    improved: int
    unchanged: int
    worsened: int
    proportions: tuple[float, float, float]  # improved/unchanged/worsened %
    effect: MeanEffect
    wilcoxon: WilcoxonResult | None = None
    mcnemar: McNemarResult | None = None
    histogram: list[tuple[float, float, int]] = field(default_factory=list)


@dataclass
class PairedComparison:
    n_cases: int
    case_ids: list[str]
    metrics: dict[str, MetricComparison]
    steps: MetricComparison | None = None
    manifest: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def enc(mc: MetricComparison) -> dict:
            out = asdict(mc)
            out["histogram"] = [list(b) for b in mc.histogram]
            return out

        return {
            "n_cases": self.n_cases,
            "case_ids": self.case_ids,
            "metrics": {k: enc(v) for k, v in self.metrics.items()},
            "steps": enc(self.steps) if self.steps else None,
            "manifest": self.manifest,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def histogram_bins(
    deltas: list[float],
    width: float = HISTOGRAM_BIN_WIDTH,
    lo: float = HISTOGRAM_RANGE[0],
    hi: float = HISTOGRAM_RANGE[1],
) -> list[tuple[float, float, int]]:
    """Fixed-width bins [low, high); the last bin includes its upper edge."""
    nbins = int(round((hi - lo) / width))
    bins = [(lo + i * width, lo + (i + 1) * width, 0) for i in range(nbins)]
    counts = [0] * nbins
    for d in deltas:
        if d < lo or d > hi:
            continue
        i = min(int((d - lo) // width), nbins - 1)
        counts[i] += 1
    return [(b[0], b[1], counts[i]) for i, b in enumerate(bins)]


def write_histogram_csv(path: str | Path, bins: list[tuple[float, float, int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for low, high, count in bins:
            writer.writerow([low, high, count])


def _compare_metric(
    metric: str,
    old: dict[str, float],
    new: dict[str, float],
    case_ids: list[str],
    seed: int,
    binary: bool,
) -> MetricComparison:
    deltas = {cid: new[cid] - old[cid] for cid in case_ids}
    values = [deltas[cid] for cid in case_ids]
    improved = sum(1 for v in values if v > 0)
    worsened = sum(1 for v in values if v < 0)
    unchanged = len(values) - improved - worsened
    n = len(values)
    proportions = (100.0 * improved / n, 100.0 * unchanged / n, 100.0 * worsened / n)
    comparison = MetricComparison(
        metric=metric,
        deltas=deltas,
        improved=improved,
        unchanged=unchanged,
        worsened=worsened,
        proportions=proportions,
        effect=mean_effect_ci(values, seed=seed),
        histogram=histogram_bins(values),
    )
    if binary:
        b = sum(
            1 for cid in case_ids
            if old[cid] < BINARY_PASS_THRESHOLD <= new[cid]
        )
        c = sum(
            1 for cid in case_ids
            if new[cid] < BINARY_PASS_THRESHOLD <= old[cid]
        )
        comparison.mcnemar = mcnemar(b, c)
    else:
        comparison.wilcoxon = wilcoxon_signed_rank(values)
    return comparison


def paired_compare(run_old: BatchReport, run_new: BatchReport, seed: int = 0) -> PairedComparison:
    """Per-case deltas (new - old) over the case intersection.

    Continuous metrics get the Wilcoxon signed-rank test, binary metrics
    McNemar on discordant pass/fail pairs; every metric gets the mean
    effect with a bootstrap CI and a fixed-width delta histogram.
    """
    common = sorted(set(run_old.cases) & set(run_new.cases))
    if not common:
        raise EmptyIntersection("runs share no cases")
    metrics: dict[str, MetricComparison] = {}
    for m in CONTINUOUS_METRICS:
        old = {cid: run_old.cases[cid].metrics[m] for cid in common}
        new = {cid: run_new.cases[cid].metrics[m] for cid in common}
        metrics[m] = _compare_metric(m, old, new, common, seed, binary=False)
    for m in BINARY_METRICS:
        old = {cid: run_old.cases[cid].metrics[m] for cid in common}
        new = {cid: run_new.cases[cid].metrics[m] for cid in common}
        metrics[m] = _compare_metric(m, old, new, common, seed, binary=True)
    steps_old = {cid: run_old.cases[cid].mean_steps for cid in common}
    steps_new = {cid: run_new.cases[cid].mean_steps for cid in common}
    steps = _compare_metric("steps", steps_old, steps_new, common, seed, binary=False)
    return PairedComparison(
        n_cases=len(common),
        case_ids=common,
        metrics=metrics,
        steps=steps,
        manifest={
            "old": run_old.manifest,
            "new": run_new.manifest,
            "seed": seed,
        },
    )
