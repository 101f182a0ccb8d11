import pytest

from dotsbench.aggregate import (
    BatchReport,
    ScoredRun,
    aggregate_batch,
    histogram_bins,
    paired_compare,
    write_histogram_csv,
)
from dotsbench.errors import EmptyBatch, EmptyIntersection
from dotsbench.scoring import DotsRecord


def run_of(case_id, category, steps=10, expected=10, **metrics) -> ScoredRun:
    dots = DotsRecord(steps=steps, **metrics)
    return ScoredRun(case_id=case_id, category=category, dots=dots, expected_steps=expected)


def make_step_fixture():
    """33 case-runs totalling 341 steps: 31 runs of 10 plus 15 and 16."""
    steps = [10] * 31 + [15, 16]
    assert sum(steps) == 341 and len(steps) == 33
    return [
        run_of(f"case-{i}", "InternalMedicine", steps=s, expected=10)
        for i, s in enumerate(steps)
    ]


class TestAggregateBatch:
    def test_average_steps_fixture(self):
        report = aggregate_batch(make_step_fixture())
        assert report.total_steps == 341
        assert report.average_steps == pytest.approx(10.33, abs=0.005)

    def test_flat_equals_balanced_for_equal_categories(self):
        runs = [
            run_of("a", "InternalMedicine", diagnosis_accuracy=80.0),
            run_of("b", "Surgery", diagnosis_accuracy=90.0),
        ]
        report = aggregate_batch(runs)
        assert report.average["diagnosis_accuracy"] == pytest.approx(85.0)
        assert report.balanced["diagnosis_accuracy"] == pytest.approx(85.0)

    def test_flat_vs_balanced_divergence_3_to_1(self):
        runs = [run_of(f"a{i}", "InternalMedicine", diagnosis_accuracy=100.0) for i in range(3)]
        runs.append(run_of("b0", "Surgery", diagnosis_accuracy=0.0))
        report = aggregate_batch(runs)
        assert report.average["diagnosis_accuracy"] == pytest.approx(75.0)
        assert report.balanced["diagnosis_accuracy"] == pytest.approx(50.0)

    def test_case_level_mean_over_runs(self):
        runs = [
            run_of("a", "Surgery", treatment_accuracy=40.0),
            run_of("a", "Surgery", treatment_accuracy=60.0),
        ]
        report = aggregate_batch(runs)
        assert report.cases["a"].metrics["treatment_accuracy"] == pytest.approx(50.0)
        assert report.cases["a"].num_runs == 2

    def test_outside_band_counting(self):
        runs = [
            run_of("in-band", "Surgery", steps=10, expected=10),
            run_of("above", "Surgery", steps=13, expected=10),
            run_of("boundary", "Surgery", steps=12, expected=10),  # 12 < 12.5: inside
        ]
        report = aggregate_batch(runs)
        assert report.outside_band_count == 1
        assert report.cases["above"].outside_band

    def test_errortests_and_technical_excluded(self):
        runs = [
            run_of("clin", "Surgery", diagnosis_accuracy=100.0),
            run_of("err", "ErrorTests", diagnosis_accuracy=0.0),
            ScoredRun("tech", "Surgery", DotsRecord(diagnosis_accuracy=0.0, steps=1),
                      expected_steps=1, scopes=("Technical",)),
        ]
        report = aggregate_batch(runs)
        assert set(report.cases) == {"clin"}
        assert report.excluded == ["err", "tech"]
        assert report.average["diagnosis_accuracy"] == 100.0

    def test_empty_input_raises(self):
        with pytest.raises(EmptyBatch):
            aggregate_batch([])
        with pytest.raises(EmptyBatch):
            aggregate_batch([run_of("e", "ErrorTests")])

    def test_mean_preserving_case_addition(self):
        runs = [
            run_of("a", "Surgery", treatment_accuracy=40.0),
            run_of("b", "Surgery", treatment_accuracy=60.0),
        ]
        before = aggregate_batch(runs).average["treatment_accuracy"]
        runs.append(run_of("c", "Surgery", treatment_accuracy=before))
        after = aggregate_batch(runs).average["treatment_accuracy"]
        assert after == pytest.approx(before, abs=1e-9)

    def test_roundtrip_json(self, tmp_path):
        report = aggregate_batch(make_step_fixture(), manifest={"seed": 7})
        path = tmp_path / "report.json"
        report.save(path)
        again = BatchReport.load(path)
        assert again.total_steps == report.total_steps
        assert again.cases.keys() == report.cases.keys()
        assert again.manifest == {"seed": 7}


def reports_for_deltas(deltas: dict[str, float], metric: str = "treatment_accuracy"):
    """Two batch reports whose per-case difference on `metric` is `deltas`."""
    old_runs, new_runs = [], []
    for cid, delta in deltas.items():
        base = 50.0
        old_runs.append(run_of(cid, "InternalMedicine", **{metric: base}))
        new_runs.append(run_of(cid, "InternalMedicine", **{metric: base + delta}))
    return aggregate_batch(old_runs), aggregate_batch(new_runs)


class TestPairedCompare:
    def test_identical_runs(self):
        old, new = reports_for_deltas({f"c{i}": 0.0 for i in range(10)})
        comparison = paired_compare(old, new)
        mc = comparison.metrics["treatment_accuracy"]
        assert mc.proportions == (0.0, 100.0, 0.0)
        assert mc.wilcoxon.p_two_sided == 1.0
        assert all(v == 0.0 for v in mc.deltas.values())
        binary = comparison.metrics["diagnosis_accuracy"]
        assert binary.mcnemar.p_exact == 1.0

    def test_proportions_254_fixture(self):
        deltas = {}
        for i in range(104):
            deltas[f"up{i:03d}"] = +10.0
        for i in range(85):
            deltas[f"same{i:03d}"] = 0.0
        for i in range(65):
            deltas[f"down{i:03d}"] = -10.0
        assert len(deltas) == 254
        old, new = reports_for_deltas(deltas)
        comparison = paired_compare(old, new)
        improved, unchanged, worsened = comparison.metrics["treatment_accuracy"].proportions
        assert improved == pytest.approx(40.9, abs=0.05)
        assert unchanged == pytest.approx(33.5, abs=0.05)
        assert worsened == pytest.approx(25.6, abs=0.05)

    def test_disjoint_case_sets(self):
        old, _ = reports_for_deltas({"a": 0.0})
        _, new = reports_for_deltas({"b": 0.0})
        with pytest.raises(EmptyIntersection):
            paired_compare(old, new)

    def test_intersection_only(self):
        old, _ = reports_for_deltas({"a": 0.0, "b": 0.0})
        _, new = reports_for_deltas({"b": 5.0, "c": 0.0})
        comparison = paired_compare(old, new)
        assert comparison.case_ids == ["b"]

    def test_binary_metric_uses_mcnemar(self):
        old_runs = [run_of(f"c{i}", "Surgery", diagnosis_accuracy=0.0) for i in range(6)]
        new_runs = [run_of(f"c{i}", "Surgery", diagnosis_accuracy=100.0) for i in range(6)]
        comparison = paired_compare(aggregate_batch(old_runs), aggregate_batch(new_runs))
        mc = comparison.metrics["diagnosis_accuracy"].mcnemar
        assert (mc.b, mc.c) == (6, 0)

    def test_steps_compared(self):
        old_runs = [run_of(f"c{i}", "Surgery", steps=5) for i in range(4)]
        new_runs = [run_of(f"c{i}", "Surgery", steps=9) for i in range(4)]
        comparison = paired_compare(aggregate_batch(old_runs), aggregate_batch(new_runs))
        assert comparison.steps.effect.mean == pytest.approx(4.0)

    def test_save_and_histogram_csv(self, tmp_path):
        old, new = reports_for_deltas({"a": 10.0, "b": -20.0, "c": 0.0})
        comparison = paired_compare(old, new)
        comparison.save(tmp_path / "compare.json")
        write_histogram_csv(tmp_path / "histogram.csv",
                            comparison.metrics["treatment_accuracy"].histogram)
        lines = (tmp_path / "histogram.csv").read_text().splitlines()
        assert lines[0] == "bin_low,bin_high,count"
        assert len(lines) == 21
        assert sum(int(line.split(",")[2]) for line in lines[1:]) == 3


class TestHistogramBins:
    def test_default_bins(self):
        bins = histogram_bins([0.0, 5.0, -5.0, 100.0, -100.0, 15.0])
        assert len(bins) == 20
        assert bins[0][:2] == (-100.0, -90.0)
        assert bins[-1][:2] == (90.0, 100.0)
        # -100 in first bin, 100 in last (upper edge inclusive)
        assert bins[0][2] == 1
        assert bins[-1][2] == 1
        # 0 and 5 land in [0, 10); -5 in [-10, 0); 15 in [10, 20)
        by_low = {b[0]: b[2] for b in bins}
        assert by_low[0.0] == 2
        assert by_low[-10.0] == 1
        assert by_low[10.0] == 1

    def test_out_of_range_ignored(self):
        bins = histogram_bins([150.0, -150.0])
        assert sum(b[2] for b in bins) == 0
