import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dotsbench.cases import WeightedItem, WeightedStandard
from dotsbench.evaluator import (
    CodeResult,
    CriticalStatus,
    DiagnosisResult,
    DifferentialResult,
    ExtractionRecord,
    QuestionResult,
    TreatmentCounts,
)
from dotsbench.scoring import (
    NOT_APPLICABLE,
    OK,
    VIOLATED,
    apply_critical_override,
    critical_passed_run,
    diagnosis_accuracy,
    differential_accuracy,
    differential_topk,
    icd10_accuracy,
    icd10_ratio,
    question_accuracy,
    step_flag,
    treatment_accuracy,
    weighted_standard_score,
)

from .oracles import (
    oracle_ratio_metric,
    oracle_step_flag,
    oracle_topk,
    oracle_treatment_accuracy,
    oracle_weighted_score,
    weight_partitions,
)


def questions(asked: int, total: int):
    return [QuestionResult(f"q{i}", asked=i < asked) for i in range(total)]


class TestQuestionAccuracy:
    def test_three_of_four(self):
        assert question_accuracy(questions(3, 4)) == 75.0

    def test_none_asked(self):
        assert question_accuracy(questions(0, 5)) == 0.0

    def test_empty_list_vacuous(self):
        assert question_accuracy([]) == 100.0


class TestDiagnosisAccuracy:
    def test_one_correct_of_three(self):
        results = [DiagnosisResult("a", False), DiagnosisResult("b", True), DiagnosisResult("c", False)]
        assert diagnosis_accuracy(results) == 100.0

    def test_all_incorrect(self):
        assert diagnosis_accuracy([DiagnosisResult("a", False)]) == 0.0

    def test_empty(self):
        assert diagnosis_accuracy([]) == 0.0


class TestIcd10Accuracy:
    def test_one_of_three_scores_100(self):
        results = [CodeResult("A01", True), CodeResult("B02", False), CodeResult("C03", False)]
        assert icd10_accuracy(results) == 100.0
        assert icd10_ratio(results) == pytest.approx(100.0 / 3)

    def test_zero_of_two(self):
        assert icd10_accuracy([CodeResult("A01", False), CodeResult("B02", False)]) == 0.0

    def test_empty(self):
        assert icd10_accuracy([]) == 0.0
        assert icd10_ratio([]) == 0.0


class TestDifferentialAccuracy:
    def test_two_of_four(self):
        results = [DifferentialResult(f"d{i}", correct=i < 2) for i in range(4)]
        assert differential_accuracy(results) == 50.0

    def test_all_matched(self):
        assert differential_accuracy([DifferentialResult("d", True)]) == 100.0

    def test_empty_vacuous(self):
        assert differential_accuracy([]) == 100.0


class TestDifferentialTopK:
    def test_rank_2_inside_top3(self):
        assert differential_topk(["x", "gold", "y"], ["gold"], 3) == 100.0

    def test_rank_4_boundary(self):
        ranked = ["a", "b", "c", "gold"]
        assert differential_topk(ranked, ["gold"], 3) == 0.0
        assert differential_topk(ranked, ["gold"], 5) == 100.0

    def test_empty_prediction(self):
        assert differential_topk([], ["gold"], 3) == 0.0

    def test_synonyms_accepted(self):
        assert differential_topk(["Cystocele"], ["Pelvic organ prolapse"], 3,
                                 synonyms=["cystocele"]) == 100.0


class TestTreatmentAccuracy:
    def test_examples(self):
        assert treatment_accuracy(3, 1, 1, 0) == 60.0
        assert treatment_accuracy(0, 0, 0, 0) == 100.0
        assert treatment_accuracy(0, 2, 1, 1) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            treatment_accuracy(-1, 0, 0, 0)

    def test_exhaustive_grid_vs_oracle(self):
        for m, e, mi, d in itertools.product(range(6), repeat=4):
            assert treatment_accuracy(m, e, mi, d) == oracle_treatment_accuracy(m, e, mi, d)


def std_of(weights, penalty=5.0, optional=()):
    return WeightedStandard(
        mandatory=tuple(WeightedItem(f"it{i}", w) for i, w in enumerate(weights)),
        optional=tuple(optional),
        unexpected_penalty=penalty,
    )


class TestWeightedStandardScore:
    def test_full_match(self):
        std = std_of([60, 40])
        assert weighted_standard_score(std, ["it0", "it1"], [], 0) == 100.0

    def test_partial_with_penalty(self):
        std = std_of([60, 40], penalty=5)
        assert weighted_standard_score(std, ["it0"], [], 2) == 50.0

    def test_clamped_at_zero(self):
        std = std_of([60, 40], penalty=5)
        assert weighted_standard_score(std, [], [], 3) == 0.0

    def test_optional_contributes_zero(self):
        std = std_of([100], optional=("opt",))
        assert weighted_standard_score(std, [], ["opt"], 0) == 0.0
        assert weighted_standard_score(std, ["it0"], ["opt"], 0) == 100.0

    def test_monotonicity(self):
        std = std_of([50, 30, 20], penalty=5)
        base = weighted_standard_score(std, ["it1"], [], 1)
        assert weighted_standard_score(std, ["it1", "it0"], [], 1) >= base
        assert weighted_standard_score(std, ["it1"], [], 2) <= base


class TestCriticalOverride:
    def test_examples(self):
        assert apply_critical_override(85, [OK, NOT_APPLICABLE]) == (85, False)
        assert apply_critical_override(85, [VIOLATED]) == (0.0, True)
        assert apply_critical_override(0, []) == (0, False)

    def test_critical_passed_run(self):
        assert critical_passed_run([OK, OK]) == 100.0
        assert critical_passed_run([OK, VIOLATED]) == 0.0
        assert critical_passed_run([]) == 100.0
        assert critical_passed_run([NOT_APPLICABLE]) == 100.0


class TestStepFlag:
    def test_examples(self):
        assert step_flag(12, 10) is False
        assert step_flag(13, 10) is True
        assert step_flag(7.5, 10) is False  # boundary inclusive
        assert step_flag(12.5, 10) is False
        assert step_flag(12.51, 10) is True


# ---------------------------------------------------------------------------
# Acceptance-grade exhaustive grids (also run standalone in test_acceptance)

def run_formula_grid():
    # ratio metrics over counts <= 5
    for total in range(6):
        for true_count in range(total + 1):
            assert question_accuracy(questions(true_count, total)) == \
                oracle_ratio_metric(true_count, total, 100.0)
            diffs = [DifferentialResult(f"d{i}", correct=i < true_count) for i in range(total)]
            assert differential_accuracy(diffs) == oracle_ratio_metric(true_count, total, 100.0)
    # treatment accuracy over counts <= 5
    for m, e, mi, d in itertools.product(range(6), repeat=4):
        assert treatment_accuracy(m, e, mi, d) == oracle_treatment_accuracy(m, e, mi, d)
    # weighted scores over every weight multiset from {10..100} summing to 100
    for weights in weight_partitions():
        std = std_of(list(weights))
        names = [f"it{i}" for i in range(len(weights))]
        for mask in range(2 ** len(weights)):
            matched_flags = [(mask >> i) & 1 == 1 for i in range(len(weights))]
            matched = [n for n, hit in zip(names, matched_flags) if hit]
            for penalty in (0, 5, 10):
                stdp = std_of(list(weights), penalty=penalty)
                for unexpected in (0, 1, 3):
                    assert weighted_standard_score(stdp, matched, [], unexpected) == \
                        oracle_weighted_score(list(weights), matched_flags, penalty, unexpected)
    # top-k over ranked lists <= 5
    for n in range(6):
        for gold_pos in range(n + 1):
            ranked = [f"p{i}" for i in range(n)]
            gold = [f"p{gold_pos}"] if gold_pos < n else ["absent"]
            for k in (3, 5):
                assert differential_topk(ranked, gold, k) == \
                    oracle_topk(ranked, set(g.lower() for g in gold), k)
    # step flag near boundaries
    for expected in range(1, 21):
        for mean in [expected * f for f in (0.5, 0.749, 0.75, 1.0, 1.25, 1.2501, 2.0)]:
            assert step_flag(mean, expected) == oracle_step_flag(mean, expected)


def test_formula_grid_matches_oracles():
    run_formula_grid()


# ---------------------------------------------------------------------------
# Property tests

@given(st.lists(st.booleans(), max_size=40))
def test_question_accuracy_range_and_permutation(flags):
    qs = [QuestionResult(f"q{i}", asked=f) for i, f in enumerate(flags)]
    value = question_accuracy(qs)
    assert 0.0 <= value <= 100.0
    random.Random(0).shuffle(qs)
    assert question_accuracy(qs) == value


@given(
    st.lists(st.sampled_from([10, 20, 30, 40, 50]), min_size=1, max_size=5),
    st.integers(min_value=0, max_value=6),
    st.floats(min_value=0, max_value=20, allow_nan=False),
)
def test_weighted_score_bounds(weights, unexpected, penalty):
    total = sum(weights)
    scale = 100.0 / total
    std = WeightedStandard(
        mandatory=tuple(WeightedItem(f"it{i}", w * scale) for i, w in enumerate(weights)),
        unexpected_penalty=penalty,
    )
    names = [f"it{i}" for i in range(len(weights))]
    value = weighted_standard_score(std, names, [], unexpected)
    assert 0.0 <= value <= 100.0


@settings(max_examples=200)
@given(st.lists(st.sampled_from([OK, VIOLATED, NOT_APPLICABLE]), max_size=6),
       st.floats(min_value=0, max_value=100, allow_nan=False))
def test_override_iff_violated(statuses, score):
    out, flag = apply_critical_override(score, statuses)
    if VIOLATED in statuses:
        assert (out, flag) == (0.0, True)
    else:
        assert (out, flag) == (score, False)
    assert critical_passed_run(statuses) == (0.0 if VIOLATED in statuses else 100.0)


def random_extraction(rng: random.Random) -> ExtractionRecord:
    n_q = rng.randint(0, 5)
    n_diag = rng.randint(0, 3)
    n_diff = rng.randint(0, 4)
    statuses = [rng.choice([OK, VIOLATED, NOT_APPLICABLE]) for _ in range(rng.randint(0, 4))]
    counts = TreatmentCounts(
        matching=rng.randint(0, 4), extra=rng.randint(0, 3),
        missing=rng.randint(0, 3), different=rng.randint(0, 2),
    )
    return ExtractionRecord(
        diagnoses_results=[DiagnosisResult(f"d{i}", rng.random() < 0.5, evidence=f"d{i}") for i in range(n_diag)],
        icd10_results=[CodeResult(f"A0{i}", rng.random() < 0.5) for i in range(n_diag)],
        differential_results=[DifferentialResult(f"x{i}", rng.random() < 0.5) for i in range(n_diff)],
        predicted_differential_ranked=[f"x{i}" for i in range(n_diff)],
        questions_asked=[QuestionResult(f"q{i}", rng.random() < 0.5, evidence=f"q{i}") for i in range(n_q)],
        treatment_counts=counts,
        treatment_matched_mandatory=["it0"] if rng.random() < 0.5 else [],
        treatment_unexpected_count=rng.randint(0, 3),
        workup_matched_mandatory=["w0"] if rng.random() < 0.5 else [],
        workup_unexpected_count=rng.randint(0, 3),
        critical_conditions=[CriticalStatus(f"c{i}", s) for i, s in enumerate(statuses)],
        is_conversation_complete=rng.random() < 0.8,
    )


def run_critical_override_fuzz(n: int = 1000) -> None:
    """Any VIOLATED zeroes the weighted treatment score and raises the flag,
    leaving every other field exactly as computed without the violation."""
    from dataclasses import replace

    from dotsbench.scoring import assemble_dots
    from .test_cases import make_case

    rng = random.Random(20260810)
    case = make_case(
        treatment_standard=WeightedStandard(
            mandatory=(WeightedItem("it0", 70), WeightedItem("it1", 30)),
            unexpected_penalty=5,
        ),
        workup_standard=WeightedStandard(
            mandatory=(WeightedItem("w0", 100),), unexpected_penalty=5,
        ),
    )
    violated_seen = 0
    for _ in range(n):
        record = random_extraction(rng)
        dots = assemble_dots(record, case, steps=rng.randint(0, 10))
        statuses = [c.result for c in record.critical_conditions]
        neutral = replace(record)
        neutral.critical_conditions = [
            CriticalStatus(c.condition, OK if c.result == VIOLATED else c.result)
            for c in record.critical_conditions
        ]
        baseline = assemble_dots(neutral, case, steps=dots.steps)
        if VIOLATED in statuses:
            violated_seen += 1
            assert dots.treatment_weighted_score == 0.0
            assert dots.critical_flag is True
            assert dots.critical_passed == 0.0
        else:
            assert dots.treatment_weighted_score == baseline.treatment_weighted_score
            assert dots.critical_flag is False
        for field_name in (
            "question_accuracy", "diagnosis_accuracy", "icd10_accuracy", "d_pass",
            "differential_accuracy", "differential_top3", "differential_top5",
            "treatment_accuracy", "diagnostic_accuracy", "conversation_complete",
            "steps", "step_flag",
        ):
            assert getattr(dots, field_name) == getattr(baseline, field_name), field_name
    assert violated_seen > 100  # the fuzz actually exercised the override


def test_critical_override_fuzz():
    run_critical_override_fuzz(300)
