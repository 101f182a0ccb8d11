"""Deterministic computation of the D.O.T.S. metric family.

Every function here is pure: an extraction record plus the case's gold
standard in, numbers out. No model calls, no I/O. Percentages live in
[0, 100]; binary metrics take exactly 0 or 100.

Vacuous inputs (no control questions, no expected differential, zero
treatment counts) score 100 rather than raising: a case that legitimately
omits a block must not be penalized for it. Such fields are marked in the
record's ``vacuous`` list so reports can show them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .cases import CaseRecord, WeightedStandard, normalize_text

OK = "OK"
VIOLATED = "VIOLATED"
NOT_APPLICABLE = "NOT_APPLICABLE"

# Red-flag band half-width for the step count, as a fraction of the
# expected value. Boundary values sit inside the band.
STEP_BAND = 0.25


@dataclass
class DotsRecord:
    """Per-run metric vector."""

    question_accuracy: float = 100.0
    diagnosis_accuracy: float = 0.0      # binary {0, 100}
    icd10_accuracy: float = 0.0          # binary {0, 100}; ratio kept as detail
    d_pass: bool = False
    differential_accuracy: float = 100.0
    differential_top3: float = 0.0       # binary {0, 100}
    differential_top5: float = 0.0       # binary {0, 100}
    treatment_accuracy: float = 100.0
    treatment_weighted_score: float = 0.0
    diagnostic_accuracy: float = 0.0     # weighted workup score
    critical_passed: float = 100.0       # binary {0, 100}
    conversation_complete: float = 0.0   # binary {0, 100}
    steps: int = 0
    step_flag: bool = False
    critical_flag: bool = False
    details: dict = field(default_factory=dict)
    vacuous: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DotsRecord":
        return cls(**obj)


# Metric names as they appear in aggregate reports. Steps are aggregated
# separately (totals, means and the red-flag band).
CONTINUOUS_METRICS = (
    "question_accuracy",
    "differential_accuracy",
    "treatment_accuracy",
    "treatment_weighted_score",
    "diagnostic_accuracy",
    "icd10_accuracy",
    "differential_top3",
    "differential_top5",
)
BINARY_METRICS = ("diagnosis_accuracy", "critical_passed", "conversation_complete")
ALL_METRICS = CONTINUOUS_METRICS + BINARY_METRICS


def question_accuracy(questions_asked: list) -> float:
    """Share of control questions the doctor actually asked, in percent."""
    if not questions_asked:
        return 100.0
    asked = sum(1 for q in questions_asked if q.asked)
    return 100.0 * asked / len(questions_asked)


def diagnosis_accuracy(diagnoses_results: list) -> float:
    """100 iff at least one final diagnosis matched the gold standard."""
    return 100.0 if any(d.correct for d in diagnoses_results) else 0.0


def icd10_accuracy(icd10_results: list) -> float:
    """100 iff at least one predicted code matched. The graded ratio is a
    diagnostic detail, not the score (see icd10_ratio)."""
    if not icd10_results:
        return 0.0
    return 100.0 if any(r.correct for r in icd10_results) else 0.0


def icd10_ratio(icd10_results: list) -> float:
    """Fraction of predicted codes that matched, in percent (detail field)."""
    if not icd10_results:
        return 0.0
    correct = sum(1 for r in icd10_results if r.correct)
    return min(100.0, 100.0 * correct / len(icd10_results))


def differential_accuracy(differential_results: list) -> float:
    """Share of expected differential items the prediction covered."""
    if not differential_results:
        return 100.0
    correct = sum(1 for d in differential_results if d.correct)
    return 100.0 * correct / len(differential_results)


def differential_topk(
    predicted_ranked: list[str],
    gold_texts: list[str],
    k: int,
    synonyms: list[str] | None = None,
) -> float:
    """100 iff a gold primary diagnosis appears within the top k predictions."""
    accepted = {normalize_text(t) for t in gold_texts}
    accepted.update(normalize_text(s) for s in (synonyms or []))
    for text in predicted_ranked[:k]:
        if normalize_text(text) in accepted:
            return 100.0
    return 0.0


def treatment_accuracy(matching: int, extra: int, missing: int, different: int) -> float:
    """matching / (matching + extra + missing + different), in percent."""
    if min(matching, extra, missing, different) < 0:
        raise ValueError("treatment counts must be nonnegative")
    total = matching + extra + missing + different
    if total == 0:
        return 100.0
    return 100.0 * matching / total


def weighted_standard_score(
    standard: WeightedStandard,
    matched_mandatory: list[str],
    matched_optional: list[str],
    unexpected_count: int,
) -> float:
    """Sum of matched mandatory weights minus the per-item penalty for
    unexpected entries, clamped to [0, 100]. Optional matches add zero."""
    if unexpected_count < 0:
        raise ValueError("unexpected_count must be >= 0")
    matched = set(matched_mandatory)
    score = sum(it.weight for it in standard.mandatory if it.name in matched)
    score -= standard.unexpected_penalty * unexpected_count
    return max(0.0, min(100.0, score))


def apply_critical_override(score: float, statuses: list[str]) -> tuple[float, bool]:
    """Any VIOLATED status zeroes the treatment score and raises the flag."""
    if VIOLATED in statuses:
        return 0.0, True
    return score, False


def critical_passed_run(statuses: list[str]) -> float:
    """100 iff every critical condition is OK or NOT_APPLICABLE."""
    if all(s in (OK, NOT_APPLICABLE) for s in statuses):
        return 100.0
    return 0.0


def step_flag(mean_steps: float, num_steps_expected: int, band: float = STEP_BAND) -> bool:
    """Red flag when the mean step count leaves the soft band around the
    expected count. Band edges are inside the band."""
    lo = (1.0 - band) * num_steps_expected
    hi = (1.0 + band) * num_steps_expected
    return not (lo <= mean_steps <= hi)


def assemble_dots(extraction, case: CaseRecord, steps: int) -> DotsRecord:
    """Build the full per-run record from an extraction and its case."""
    statuses = [c.result for c in extraction.critical_conditions]
    tws_raw = weighted_standard_score(
        case.treatment_standard,
        extraction.treatment_matched_mandatory,
        extraction.treatment_matched_optional,
        extraction.treatment_unexpected_count,
    )
    tws, crit_flag = apply_critical_override(tws_raw, statuses)
    diag = diagnosis_accuracy(extraction.diagnoses_results)
    icd = icd10_accuracy(extraction.icd10_results)
    vacuous = []
    if not extraction.questions_asked:
        vacuous.append("question_accuracy")
    if not extraction.differential_results:
        vacuous.append("differential_accuracy")
    counts = extraction.treatment_counts
    if counts.matching + counts.extra + counts.missing + counts.different == 0:
        vacuous.append("treatment_accuracy")
    return DotsRecord(
        question_accuracy=question_accuracy(extraction.questions_asked),
        diagnosis_accuracy=diag,
        icd10_accuracy=icd,
        d_pass=not (diag == 0.0 and icd == 0.0),
        differential_accuracy=differential_accuracy(extraction.differential_results),
        differential_top3=differential_topk(
            extraction.predicted_differential_ranked,
            list(case.diagnosis_texts), 3, list(case.additional_answers)),
        differential_top5=differential_topk(
            extraction.predicted_differential_ranked,
            list(case.diagnosis_texts), 5, list(case.additional_answers)),
        treatment_accuracy=treatment_accuracy(
            counts.matching, counts.extra, counts.missing, counts.different),
        treatment_weighted_score=tws,
        diagnostic_accuracy=weighted_standard_score(
            case.workup_standard,
            extraction.workup_matched_mandatory,
            extraction.workup_matched_optional,
            extraction.workup_unexpected_count,
        ),
        critical_passed=critical_passed_run(statuses),
        conversation_complete=100.0 if extraction.is_conversation_complete else 0.0,
        steps=steps,
        step_flag=step_flag(float(steps), case.num_steps),
        critical_flag=crit_flag,
        details={
            "icd10_ratio": icd10_ratio(extraction.icd10_results),
            "treatment_weighted_raw": tws_raw,
        },
        vacuous=vacuous,
    )
