"""Transcript evaluation: a structured, evidence-anchored extraction record.

Four assessment tasks run concurrently over a finished transcript:
clinical evaluation (diagnoses and differential), history-taking
assessment (control-question coverage), treatment verification (buckets
plus critical safety conditions) and diagnostic-workup checking. Each
task tries a deterministic matching pass first (normalized text equality,
the gold synonym list, ICD-10 code rules); only items that pass leaves
unresolved go to the judge model, one structured call per task. Offline,
with no judge, unresolved items simply do not match.

Recommendation-derived fields (diagnoses, differential ranking,
treatments, investigations) are read exclusively from the final
recommendation block. Every "true" entry must quote the transcript
verbatim; asserted matches without a verifiable quote are demoted.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cases import CaseRecord, WeightedStandard, normalize_text
from .dialogue import FinalBlock, Transcript, final_block_of
from .gateway import ChatMessage, ExtractionSchema, Provider, RunLog, complete_structured
from .icd10 import is_valid_icd10, match_icd10
from .scoring import NOT_APPLICABLE, OK, VIOLATED

NO_EVIDENCE = "no evidence"

# Tokens too generic to signal question intent on their own.
_STOPWORDS = frozenset(
    "a an the any you your do does did have has had is are was were been being "
    "what when where how whether there of in on at to for with about and or".split()
)

QUESTION_MATCH_THRESHOLD = 0.6


@dataclass
class DiagnosisResult:
    predicted: str
    correct: bool
    evidence: str = NO_EVIDENCE


@dataclass
class CodeResult:
    predicted: str
    correct: bool


@dataclass
class DifferentialResult:
    expected: str
    correct: bool
    matched_predicted: str | None = None


@dataclass
class QuestionResult:
    question: str
    asked: bool
    evidence: str = NO_EVIDENCE


@dataclass
class TreatmentCounts:
    matching: int = 0
    extra: int = 0
    missing: int = 0
    different: int = 0
    matching_items: list[str] = field(default_factory=list)
    extra_items: list[str] = field(default_factory=list)
    missing_items: list[str] = field(default_factory=list)
    different_items: list[str] = field(default_factory=list)


@dataclass
class CriticalStatus:
    condition: str
    result: str  # OK | VIOLATED | NOT_APPLICABLE


@dataclass
class ExtractionRecord:
    diagnoses_results: list[DiagnosisResult] = field(default_factory=list)
    icd10_results: list[CodeResult] = field(default_factory=list)
    differential_results: list[DifferentialResult] = field(default_factory=list)
    predicted_differential_ranked: list[str] = field(default_factory=list)
    questions_asked: list[QuestionResult] = field(default_factory=list)
    treatment_counts: TreatmentCounts = field(default_factory=TreatmentCounts)
    treatment_matched_mandatory: list[str] = field(default_factory=list)
    treatment_matched_optional: list[str] = field(default_factory=list)
    treatment_unexpected_count: int = 0
    workup_matched_mandatory: list[str] = field(default_factory=list)
    workup_matched_optional: list[str] = field(default_factory=list)
    workup_unexpected_count: int = 0
    workup_unexpected_items: list[str] = field(default_factory=list)
    critical_conditions: list[CriticalStatus] = field(default_factory=list)
    is_conversation_complete: bool = False

    def predicted_treatments(self) -> list[str]:
        c = self.treatment_counts
        return c.matching_items + c.extra_items + c.different_items

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ExtractionRecord":
        rec = cls(
            diagnoses_results=[DiagnosisResult(**d) for d in obj.get("diagnoses_results", [])],
            icd10_results=[CodeResult(**d) for d in obj.get("icd10_results", [])],
            differential_results=[DifferentialResult(**d) for d in obj.get("differential_results", [])],
            predicted_differential_ranked=list(obj.get("predicted_differential_ranked", [])),
            questions_asked=[QuestionResult(**d) for d in obj.get("questions_asked", [])],
            treatment_counts=TreatmentCounts(**obj.get("treatment_counts", {})),
            treatment_matched_mandatory=list(obj.get("treatment_matched_mandatory", [])),
            treatment_matched_optional=list(obj.get("treatment_matched_optional", [])),
            treatment_unexpected_count=obj.get("treatment_unexpected_count", 0),
            workup_matched_mandatory=list(obj.get("workup_matched_mandatory", [])),
            workup_matched_optional=list(obj.get("workup_matched_optional", [])),
            workup_unexpected_count=obj.get("workup_unexpected_count", 0),
            workup_unexpected_items=list(obj.get("workup_unexpected_items", [])),
            critical_conditions=[CriticalStatus(**d) for d in obj.get("critical_conditions", [])],
            is_conversation_complete=obj.get("is_conversation_complete", False),
        )
        return rec

    def save(self, directory: str | Path, run_id: str) -> Path:
        path = Path(directory) / f"{run_id}.extraction.json"
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path


# ---------------------------------------------------------------------------
# Deterministic text matching

def match_clinical_text(
    predicted: str,
    gold: list[str],
    synonyms: list[str] | None = None,
) -> bool:
    """Case- and punctuation-insensitive equality against gold texts and the
    case's accepted alternative phrasings. The deterministic half of the
    two-stage match; judge-backed equivalence is layered on by the caller."""
    norm = normalize_text(predicted)
    accepted = {normalize_text(g) for g in gold}
    accepted.update(normalize_text(s) for s in (synonyms or []))
    return norm in accepted


def _item_matches(gold_name: str, predicted: str) -> bool:
    """A gold item matches a prescription/order line naming it (the line may
    carry dose or qualifiers)."""
    g, p = normalize_text(gold_name), normalize_text(predicted)
    return g == p or (g in p and bool(g))


def _match_standard(
    standard: WeightedStandard,
    predicted: list[str],
) -> tuple[list[str], list[str], list[str], list[str]]:
    """Match predicted items against a weighted standard.

    Returns (matched_mandatory_gold_names, matched_optional_gold_names,
    matched_predicted_items, unmatched_predicted_items). Duplicate
    predictions collapse; each gold name counts once.
    """
    seen: set[str] = set()
    deduped = []
    for p in predicted:
        n = normalize_text(p)
        if n and n not in seen:
            seen.add(n)
            deduped.append(p)
    matched_mand: list[str] = []
    matched_opt: list[str] = []
    matched_pred: list[str] = []
    unmatched: list[str] = []
    for p in deduped:
        hit = None
        for it in standard.mandatory:
            if it.name not in matched_mand and _item_matches(it.name, p):
                hit = ("mandatory", it.name)
                break
        if hit is None:
            for name in standard.optional:
                if name not in matched_opt and _item_matches(name, p):
                    hit = ("optional", name)
                    break
        if hit is None:
            unmatched.append(p)
        else:
            matched_pred.append(p)
            if hit[0] == "mandatory":
                matched_mand.append(hit[1])
            else:
                matched_opt.append(hit[1])
    return matched_mand, matched_opt, matched_pred, unmatched


# ---------------------------------------------------------------------------
# Critical conditions

def verify_critical_conditions(extraction: ExtractionRecord, case: CaseRecord) -> list[CriticalStatus]:
    """Evaluate every declarative safety trigger against the extraction."""
    prescribed = [normalize_text(t) for t in extraction.predicted_treatments()]
    out: list[CriticalStatus] = []
    for cond in case.critical_conditions:
        if cond.applies_if_tags_any is not None and not (set(cond.applies_if_tags_any) & set(case.tags)):
            out.append(CriticalStatus(cond.description, NOT_APPLICABLE))
            continue
        names = [normalize_text(n) for n in cond.names]
        mentioned = any(n and n in p for n in names for p in prescribed)
        if cond.kind == "treatment-contains-any":
            out.append(CriticalStatus(cond.description, VIOLATED if mentioned else OK))
        elif cond.kind == "treatment-missing-all":
            out.append(CriticalStatus(cond.description, VIOLATED if not mentioned else OK))
        else:
            raise ValueError(f"unknown trigger kind {cond.kind!r}")
    return out


# ---------------------------------------------------------------------------
# Judge schemas (one structured call per task, only for unresolved items)

CLINICAL_SCHEMA = ExtractionSchema("clinical-equivalence", {
    "type": "object",
    "properties": {
        "items": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "predicted": {"type": "string"},
                    "equivalent": {"type": "boolean"},
                    "evidence": {"type": "string"},
                },
                "required": ["predicted", "equivalent", "evidence"],
            },
        },
    },
    "required": ["items"],
})

HISTORY_SCHEMA = ExtractionSchema("history-taking", {
    "type": "object",
    "properties": {
        "questions": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "question": {"type": "string"},
                    "asked": {"type": "boolean"},
                    "evidence": {"type": "string"},
                },
                "required": ["question", "asked", "evidence"],
            },
        },
    },
    "required": ["questions"],
})

TREATMENT_SCHEMA = ExtractionSchema("treatment-buckets", {
    "type": "object",
    "properties": {
        "items": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "item": {"type": "string"},
                    "bucket": {"type": "string", "enum": ["matching", "different", "extra"]},
                    "gold_slot": {"type": "string"},
                    "evidence": {"type": "string"},
                },
                "required": ["item", "bucket"],
            },
        },
    },
    "required": ["items"],
})

WORKUP_SCHEMA = ExtractionSchema("workup-buckets", {
    "type": "object",
    "properties": {
        "items": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "item": {"type": "string"},
                    "bucket": {"type": "string", "enum": ["mandatory", "optional", "unexpected"]},
                    "gold_item": {"type": "string"},
                },
                "required": ["item", "bucket"],
            },
        },
    },
    "required": ["items"],
})


def _judge_context(transcript: Transcript, case: CaseRecord, instruction: str) -> list[ChatMessage]:
    return [
        ChatMessage(role="system", text=(
            "You are a strict clinical evaluation judge. Quote the dialogue "
            "verbatim as evidence, or use the literal string 'no evidence'. "
            "Reply with a single JSON object."
        )),
        ChatMessage(role="judge", text=(
            f"Dialogue:\n{transcript.full_text()}\n\n"
            f"Gold standard (case {case.id}):\n{json.dumps({'diagnosis': list(case.diagnosis_texts), 'differential': list(case.differential)})}\n\n"
            f"Task: {instruction}"
        )),
    ]


# ---------------------------------------------------------------------------
# The four tasks

def _task_clinical(
    transcript: Transcript, case: CaseRecord, final: FinalBlock | None,
    judge: Provider | None, log: RunLog | None,
) -> dict:
    if final is None:
        return {
            "diagnoses_results": [],
            "icd10_results": [],
            "differential_results": [
                DifferentialResult(expected=e, correct=False) for e in case.differential
            ],
            "predicted_differential_ranked": [],
        }
    synonyms = list(case.additional_answers)
    diagnoses: list[DiagnosisResult] = []
    unresolved: list[str] = []
    for pred in final.diagnoses:
        if match_clinical_text(pred, list(case.diagnosis_texts), synonyms):
            diagnoses.append(DiagnosisResult(pred, True, evidence=pred))
        else:
            diagnoses.append(DiagnosisResult(pred, False))
            unresolved.append(pred)
    if judge is not None and unresolved:
        verdicts = complete_structured(
            judge,
            _judge_context(transcript, case, (
                "For each predicted diagnosis below, say whether it is clinically "
                "equivalent to the gold primary diagnosis. "
                f"Predicted: {json.dumps(unresolved)}"
            )),
            CLINICAL_SCHEMA, log=log, task="clinical",
        )
        by_pred = {v["predicted"]: v for v in verdicts["items"]}
        for d in diagnoses:
            v = by_pred.get(d.predicted)
            if v and v["equivalent"]:
                d.correct = True
                d.evidence = v.get("evidence", NO_EVIDENCE)

    codes = [
        CodeResult(pred, is_valid_icd10(pred) and match_icd10(pred, list(case.icd10_codes)))
        for pred in final.icd10
    ]

    predicted_diff = list(final.differential)
    diff_results: list[DifferentialResult] = []
    for expected in case.differential:
        hit = next(
            (p for p in predicted_diff if match_clinical_text(p, [expected], synonyms)),
            None,
        )
        diff_results.append(DifferentialResult(expected=expected, correct=hit is not None,
                                               matched_predicted=hit))
    if judge is not None and any(not r.correct for r in diff_results) and predicted_diff:
        open_items = [r.expected for r in diff_results if not r.correct]
        verdicts = complete_structured(
            judge,
            _judge_context(transcript, case, (
                "For each expected differential item below, say whether any entry of "
                f"the predicted differential {json.dumps(predicted_diff)} is equivalent to it. "
                f"Expected: {json.dumps(open_items)}"
            )),
            CLINICAL_SCHEMA, log=log, task="differential",
        )
        by_item = {v["predicted"]: v for v in verdicts["items"]}
        for r in diff_results:
            v = by_item.get(r.expected)
            if v and v["equivalent"]:
                r.correct = True
                r.matched_predicted = v.get("evidence") or None
    return {
        "diagnoses_results": diagnoses,
        "icd10_results": codes,
        "differential_results": diff_results,
        "predicted_differential_ranked": predicted_diff,
    }


def _significant_tokens(text: str) -> set[str]:
    return {t for t in normalize_text(text).split() if t not in _STOPWORDS}


def _task_history(
    transcript: Transcript, case: CaseRecord,
    judge: Provider | None, log: RunLog | None,
) -> dict:
    """Control-question coverage over history-taking turns (the final
    recommendation block is not a question)."""
    from .dialogue import parse_final_block

    doctor_turns = [
        t.text for t in transcript.doctor_turns() if parse_final_block(t.text) is None
    ]
    results: list[QuestionResult] = []
    unresolved: list[str] = []
    for q in case.control_questions:
        q_tokens = _significant_tokens(q)
        best = None
        for turn in doctor_turns:
            turn_tokens = _significant_tokens(turn)
            if not q_tokens:
                continue
            overlap = len(q_tokens & turn_tokens) / len(q_tokens)
            if overlap >= QUESTION_MATCH_THRESHOLD:
                best = turn
                break
        if best is not None:
            results.append(QuestionResult(q, True, evidence=best))
        else:
            results.append(QuestionResult(q, False))
            unresolved.append(q)
    if judge is not None and unresolved:
        verdicts = complete_structured(
            judge,
            _judge_context(transcript, case, (
                "For each mandatory history-taking question below, say whether the "
                "doctor asked it (paraphrase counts) and quote the doctor turn. "
                f"Questions: {json.dumps(unresolved)}"
            )),
            HISTORY_SCHEMA, log=log, task="history",
        )
        by_q = {v["question"]: v for v in verdicts["questions"]}
        for r in results:
            v = by_q.get(r.question)
            if v and v["asked"]:
                r.asked = True
                r.evidence = v.get("evidence", NO_EVIDENCE)
    return {"questions_asked": results}


def _task_treatment(
    transcript: Transcript, case: CaseRecord, final: FinalBlock | None,
    judge: Provider | None, log: RunLog | None,
) -> dict:
    predicted = list(final.treatments) if final else []
    std = case.treatment_standard
    matched_mand, matched_opt, matched_pred, unmatched = _match_standard(std, predicted)
    different: list[str] = []
    extra = list(unmatched)
    if judge is not None and unmatched:
        verdicts = complete_structured(
            judge,
            _judge_context(transcript, case, (
                "Classify each prescribed item not in the gold standard: 'different' "
                "if it fills a gold mandatory slot with another agent, else 'extra'. "
                f"Gold mandatory: {json.dumps(std.mandatory_names())}. "
                f"Items: {json.dumps(unmatched)}"
            )),
            TREATMENT_SCHEMA, log=log, task="treatment",
        )
        by_item = {v["item"]: v for v in verdicts["items"]}
        different = [p for p in unmatched if by_item.get(p, {}).get("bucket") == "different"]
        extra = [p for p in unmatched if p not in different]
    missing = [n for n in std.mandatory_names() if n not in matched_mand]
    counts = TreatmentCounts(
        matching=len(matched_pred),
        extra=len(extra),
        missing=len(missing),
        different=len(different),
        matching_items=matched_pred,
        extra_items=extra,
        missing_items=missing,
        different_items=different,
    )
    return {
        "treatment_counts": counts,
        "treatment_matched_mandatory": matched_mand,
        "treatment_matched_optional": matched_opt,
        # both extras and slot-mismatches are outside the standard
        "treatment_unexpected_count": len(extra) + len(different),
    }


def _task_workup(
    transcript: Transcript, case: CaseRecord, final: FinalBlock | None,
    judge: Provider | None, log: RunLog | None,
) -> dict:
    predicted = list(final.investigations) if final else []
    std = case.workup_standard
    matched_mand, matched_opt, _, unmatched = _match_standard(std, predicted)
    unexpected = list(unmatched)
    if judge is not None and unmatched:
        verdicts = complete_structured(
            judge,
            _judge_context(transcript, case, (
                "Classify each ordered investigation: 'mandatory' or 'optional' if it "
                "is the same study as a gold item under another name, else 'unexpected'. "
                f"Gold mandatory: {json.dumps(std.mandatory_names())}; "
                f"optional: {json.dumps(list(std.optional))}. Items: {json.dumps(unmatched)}"
            )),
            WORKUP_SCHEMA, log=log, task="workup",
        )
        by_item = {v["item"]: v for v in verdicts["items"]}
        unexpected = []
        for p in unmatched:
            v = by_item.get(p, {})
            gold = v.get("gold_item", "")
            if v.get("bucket") == "mandatory" and gold in std.mandatory_names() and gold not in matched_mand:
                matched_mand.append(gold)
            elif v.get("bucket") == "optional" and gold in std.optional and gold not in matched_opt:
                matched_opt.append(gold)
            else:
                unexpected.append(p)
    return {
        "workup_matched_mandatory": matched_mand,
        "workup_matched_optional": matched_opt,
        "workup_unexpected_count": len(unexpected),
        "workup_unexpected_items": unexpected,
    }


# ---------------------------------------------------------------------------
# Evidence integrity

def sanitize_evidence(record: ExtractionRecord, transcript: Transcript) -> ExtractionRecord:
    """Demote any asserted match whose evidence is not a verbatim quote."""
    text = transcript.full_text()
    for d in record.diagnoses_results:
        if d.correct and (d.evidence == NO_EVIDENCE or d.evidence not in text):
            d.correct = False
            d.evidence = NO_EVIDENCE
        if not d.correct and d.evidence != NO_EVIDENCE and d.evidence not in text:
            d.evidence = NO_EVIDENCE
    for q in record.questions_asked:
        if q.asked and (q.evidence == NO_EVIDENCE or q.evidence not in text):
            q.asked = False
            q.evidence = NO_EVIDENCE
    return record


# ---------------------------------------------------------------------------
# Entry point

def evaluate_transcript(
    transcript: Transcript,
    case: CaseRecord,
    judge: Provider | None = None,
    log: RunLog | None = None,
) -> ExtractionRecord:
    """Run the four assessment tasks concurrently and merge their outputs.

    A SchemaViolation in any task propagates: the run is evaluator-failed,
    which is a different failure class than a doctor failure.
    """
    final = final_block_of(transcript)
    with ThreadPoolExecutor(max_workers=4) as pool:
        f_clinical = pool.submit(_task_clinical, transcript, case, final, judge, log)
        f_history = pool.submit(_task_history, transcript, case, judge, log)
        f_treatment = pool.submit(_task_treatment, transcript, case, final, judge, log)
        f_workup = pool.submit(_task_workup, transcript, case, final, judge, log)
        merged: dict = {}
        for fut in (f_clinical, f_history, f_treatment, f_workup):
            merged.update(fut.result())
    record = ExtractionRecord(
        **merged,
        is_conversation_complete=transcript.is_conversation_complete,
    )
    record.critical_conditions = verify_critical_conditions(record, case)
    return sanitize_evidence(record, transcript)
