"""Case bank: gold-standard clinical scenarios that drive every simulation.

A case file is one JSON document per scenario. Field names on disk are
fixed (``id, name, category, tags, scopes, intro, control_questions,
additional_answers, attachments, diagnosis, differential, num_steps,
diagnostic_workup, default_treatments, complex_test_cases,
patient_archetype, error_test_spec`` plus ``schema_version``, ``version``,
``fact_bank``, ``archetype_params``, ``trap_rule`` and ``provenance``).
Unknown fields are rejected: gold standards must not rot through typos.

Banks are directories of case files plus a ``manifest.json``. A loaded
bank is immutable; mutation happens only by reloading the directory.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .icd10 import is_valid_icd10

SCHEMA_VERSION = 1

CATEGORIES = (
    "InternalMedicine",
    "Pediatrics",
    "Surgery",
    "Oncology",
    "ObGyn",
    "Psychiatry",
    "EmergencyMedicine",
    "ErrorTests",
)

ARCHETYPES = ("neutral", "over-sharer", "insistent", "denier", "questioner", "returner")

DIFFICULTIES = ("Basic", "Intermediate", "Advanced", "Expert")

ATTACHMENT_KINDS = ("lab-report", "medical-report", "patient-diary", "device-photo", "body-photo")

AGE_GROUPS = ("0-1", "2-12", "13-17", "18-25", "26-39", "40-59", "60+")

# Target proportion bands per clinical category, in percent. Categories
# without a stated target are reported without a band.
CATEGORY_TARGET_BANDS = {
    "InternalMedicine": (50.0, 60.0),
    "Surgery": (25.0, 30.0),
    "Pediatrics": (20.0, 25.0),
    "ObGyn": (10.0, 20.0),
    "Psychiatry": (10.0, 15.0),
}

_CASE_FIELDS = {
    "schema_version", "id", "name", "version", "category", "scopes", "tags",
    "intro", "fact_bank", "control_questions", "additional_answers",
    "attachments", "diagnosis", "differential", "num_steps",
    "diagnostic_workup", "default_treatments", "complex_test_cases",
    "patient_archetype", "archetype_params", "error_test_spec", "trap_rule",
    "provenance",
}


@dataclass(frozen=True)
class WeightedItem:
    name: str
    weight: float


@dataclass(frozen=True)
class WeightedStandard:
    """Mandatory items carry weights summing to 100; optional items score 0;
    every unexpected item costs a fixed penalty."""

    mandatory: tuple[WeightedItem, ...] = ()
    optional: tuple[str, ...] = ()
    unexpected_penalty: float = 5.0

    def mandatory_names(self) -> list[str]:
        return [it.name for it in self.mandatory]

    def weight_of(self, name: str) -> float:
        for it in self.mandatory:
            if it.name == name:
                return it.weight
        return 0.0


@dataclass(frozen=True)
class CriticalCondition:
    """Safety predicate over an extraction record.

    ``trigger`` is declarative so the override stays machine-checkable:
      kind="treatment-contains-any": fires when any prescribed item
        mentions one of ``names``.
      kind="treatment-missing-all": fires when none of ``names`` was
        prescribed.
    ``applies_if_tags_any`` scopes the condition: when set and the case
    carries none of those tags, the condition is NOT_APPLICABLE.
    """

    description: str
    kind: str = "treatment-contains-any"
    names: tuple[str, ...] = ()
    applies_if_tags_any: tuple[str, ...] | None = None


@dataclass(frozen=True)
class Attachment:
    kind: str
    content_ref: str
    reveal: str = "at-intro"  # or "on-request"
    request_keywords: tuple[str, ...] = ()


@dataclass(frozen=True)
class FactEntry:
    """One topic the simulated patient may reveal, but only when asked."""

    topic: str
    answer: str
    keywords: tuple[str, ...] = ()

    def match_keywords(self) -> tuple[str, ...]:
        return self.keywords if self.keywords else (self.topic,)


@dataclass(frozen=True)
class ErrorTestSpec:
    """Meta-evaluation contract for a deliberately corrupted gold standard."""

    description: str
    baseline_case_id: str
    reference_transcript: str  # path relative to the bank directory
    expected_deltas: dict[str, float]
    tolerance: float


@dataclass(frozen=True)
class TrapRule:
    """Per-case override of the must-pass predicate for trap probes."""

    require_critical: bool = True
    require_diagnosis: bool = True
    forbid_step_flag: bool = True
    max_steps: int | None = None


@dataclass(frozen=True)
class CaseRecord:
    id: str
    name: str
    category: str
    intro: str
    diagnosis_texts: tuple[str, ...]
    icd10_codes: tuple[str, ...]
    version: int = 1
    scopes: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()
    fact_bank: tuple[FactEntry, ...] = ()
    control_questions: tuple[str, ...] = ()
    additional_answers: tuple[str, ...] = ()
    attachments: tuple[Attachment, ...] = ()
    differential: tuple[str, ...] = ()
    workup_standard: WeightedStandard = field(default_factory=WeightedStandard)
    treatment_standard: WeightedStandard = field(default_factory=WeightedStandard)
    critical_conditions: tuple[CriticalCondition, ...] = ()
    num_steps: int = 1
    complex_variants: tuple[dict, ...] = ()
    patient_archetype: str = "neutral"
    archetype_params: dict = field(default_factory=dict)
    error_test_spec: ErrorTestSpec | None = None
    trap_rule: TrapRule | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def sex(self) -> str:
        for tag in self.tags:
            if tag in ("female", "male"):
                return tag
        return "unspecified"

    @property
    def age_group(self) -> str | None:
        for tag in self.tags:
            if tag.startswith("age:"):
                return tag.split(":", 1)[1]
        return None

    @property
    def difficulty(self) -> str | None:
        for tag in self.tags:
            if tag.startswith("difficulty:"):
                return tag.split(":", 1)[1]
        return None

    def is_technical(self) -> bool:
        return "Technical" in self.scopes


@dataclass
class ValidationReport:
    case_id: str
    violations: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


# ---------------------------------------------------------------------------
# Validation

def _validate_standard(std: WeightedStandard, label: str, out: list[str]) -> None:
    names = std.mandatory_names()
    if len(set(names)) != len(names):
        out.append(f"{label}: duplicate mandatory item names")
    overlap = set(names) & set(std.optional)
    if overlap:
        out.append(f"{label}: items both mandatory and optional: {sorted(overlap)}")
    for it in std.mandatory:
        if not (0 < it.weight <= 100):
            out.append(f"{label}: weight {it.weight} for {it.name!r} outside (0, 100]")
    if std.mandatory:
        total = sum(it.weight for it in std.mandatory)
        if abs(total - 100.0) > 1e-9:
            out.append(f"{label}: weights sum {total:g} != 100")
    if std.unexpected_penalty < 0:
        out.append(f"{label}: unexpected_penalty must be >= 0")


def validate_case(case: CaseRecord) -> ValidationReport:
    """Check every case invariant; violations are data, not exceptions."""
    v: list[str] = []
    notes: list[str] = []
    if case.category not in CATEGORIES:
        v.append(f"unknown category {case.category!r}")
    if case.scopes.count("Technical") > 1:
        v.append("duplicate Technical scope")
    if case.num_steps < 1:
        v.append(f"num_steps {case.num_steps} < 1")
    if case.version < 1:
        v.append(f"version {case.version} < 1")
    if not case.diagnosis_texts:
        v.append("diagnosis texts empty")
    if not case.icd10_codes:
        v.append("icd10 codes empty")
    for code in case.icd10_codes:
        if not is_valid_icd10(code):
            v.append(f"invalid ICD-10 code {code!r}")
    _validate_standard(case.workup_standard, "diagnostic_workup", v)
    _validate_standard(case.treatment_standard, "default_treatments", v)
    if (case.error_test_spec is not None) != (case.category == "ErrorTests"):
        v.append("error_test_spec present iff category is ErrorTests")
    if case.patient_archetype not in ARCHETYPES:
        v.append(f"unknown patient archetype {case.patient_archetype!r}")
    for att in case.attachments:
        if att.kind not in ATTACHMENT_KINDS:
            v.append(f"unknown attachment kind {att.kind!r}")
        if att.reveal not in ("at-intro", "on-request"):
            v.append(f"unknown reveal policy {att.reveal!r}")
    diff = case.difficulty
    if diff is not None and diff not in DIFFICULTIES:
        v.append(f"unknown difficulty {diff!r}")
    status = case.provenance.get("status")
    if status == "published" and len(case.provenance.get("validators", [])) < 2:
        v.append("published case requires >= 2 validators")
    # The sum-to-100 rule makes the weighted score a percentage directly;
    # surfaced as a note so bank authors see the convention.
    notes.append("mandatory weights are interpreted as percentage points (sum 100)")
    return ValidationReport(case_id=case.id, violations=v, notes=notes)


# ---------------------------------------------------------------------------
# JSON (de)serialization

def _standard_from_json(obj: dict | None) -> WeightedStandard:
    if not obj:
        return WeightedStandard()
    mandatory = tuple(
        WeightedItem(name=it["name"], weight=float(it["weight"]))
        for it in obj.get("mandatory", [])
    )
    return WeightedStandard(
        mandatory=mandatory,
        optional=tuple(obj.get("optional", [])),
        unexpected_penalty=float(obj.get("unexpected_penalty", 5.0)),
    )


def _standard_to_json(std: WeightedStandard) -> dict:
    return {
        "mandatory": [{"name": it.name, "weight": it.weight} for it in std.mandatory],
        "optional": list(std.optional),
        "unexpected_penalty": std.unexpected_penalty,
    }


def _facts_from_json(obj: Any) -> tuple[FactEntry, ...]:
    entries = []
    for topic, val in (obj or {}).items():
        if isinstance(val, str):
            entries.append(FactEntry(topic=topic, answer=val))
        else:
            entries.append(FactEntry(
                topic=topic,
                answer=val["answer"],
                keywords=tuple(val.get("keywords", [])),
            ))
    return tuple(entries)


def _facts_to_json(facts: Iterable[FactEntry]) -> dict:
    out: dict[str, Any] = {}
    for f in facts:
        if f.keywords:
            out[f.topic] = {"answer": f.answer, "keywords": list(f.keywords)}
        else:
            out[f.topic] = f.answer
    return out


def case_from_json(obj: dict) -> CaseRecord:
    """Build a CaseRecord from a case-file dict. Strict: unknown keys raise."""
    unknown = set(obj) - _CASE_FIELDS
    if unknown:
        raise ValueError(f"unknown case fields: {sorted(unknown)}")
    schema_version = obj.get("schema_version", SCHEMA_VERSION)
    if schema_version != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {schema_version}")
    diagnosis = obj.get("diagnosis", {})
    treatments = obj.get("default_treatments", {}) or {}
    criticals = tuple(
        CriticalCondition(
            description=c["description"],
            kind=c.get("trigger", {}).get("kind", "treatment-contains-any"),
            names=tuple(c.get("trigger", {}).get("names", [])),
            applies_if_tags_any=(
                tuple(c["trigger"]["applies_if_tags_any"])
                if c.get("trigger", {}).get("applies_if_tags_any") else None
            ),
        )
        for c in treatments.get("critical_conditions", [])
    )
    ets = None
    if obj.get("error_test_spec"):
        e = obj["error_test_spec"]
        ets = ErrorTestSpec(
            description=e["description"],
            baseline_case_id=e["baseline_case_id"],
            reference_transcript=e["reference_transcript"],
            expected_deltas={k: float(v) for k, v in e["expected_deltas"].items()},
            tolerance=float(e["tolerance"]),
        )
    trap = None
    if obj.get("trap_rule"):
        t = obj["trap_rule"]
        trap = TrapRule(
            require_critical=bool(t.get("require_critical", True)),
            require_diagnosis=bool(t.get("require_diagnosis", True)),
            forbid_step_flag=bool(t.get("forbid_step_flag", True)),
            max_steps=t.get("max_steps"),
        )
    return CaseRecord(
        id=obj["id"],
        name=obj.get("name", obj["id"]),
        version=int(obj.get("version", 1)),
        category=obj["category"],
        scopes=tuple(obj.get("scopes", [])),
        tags=tuple(obj.get("tags", [])),
        intro=obj.get("intro", ""),
        fact_bank=_facts_from_json(obj.get("fact_bank")),
        control_questions=tuple(obj.get("control_questions", [])),
        additional_answers=tuple(obj.get("additional_answers", [])),
        attachments=tuple(
            Attachment(
                kind=a["kind"],
                content_ref=a["content_ref"],
                reveal=a.get("reveal", "at-intro"),
                request_keywords=tuple(a.get("request_keywords", [])),
            )
            for a in obj.get("attachments", [])
        ),
        diagnosis_texts=tuple(diagnosis.get("texts", [])),
        icd10_codes=tuple(diagnosis.get("icd10", [])),
        differential=tuple(obj.get("differential", [])),
        workup_standard=_standard_from_json(obj.get("diagnostic_workup")),
        treatment_standard=_standard_from_json(treatments),
        critical_conditions=criticals,
        num_steps=int(obj.get("num_steps", 1)),
        complex_variants=tuple(obj.get("complex_test_cases", [])),
        patient_archetype=obj.get("patient_archetype", "neutral"),
        archetype_params=obj.get("archetype_params", {}),
        error_test_spec=ets,
        trap_rule=trap,
        provenance=obj.get("provenance", {}),
    )


def case_to_json(case: CaseRecord) -> dict:
    """Inverse of case_from_json; canonical key order for stable files."""
    treatments = _standard_to_json(case.treatment_standard)
    treatments["critical_conditions"] = [
        {
            "description": c.description,
            "trigger": {
                "kind": c.kind,
                "names": list(c.names),
                "applies_if_tags_any": list(c.applies_if_tags_any) if c.applies_if_tags_any else None,
            },
        }
        for c in case.critical_conditions
    ]
    obj: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "id": case.id,
        "name": case.name,
        "version": case.version,
        "category": case.category,
        "scopes": list(case.scopes),
        "tags": list(case.tags),
        "intro": case.intro,
        "fact_bank": _facts_to_json(case.fact_bank),
        "control_questions": list(case.control_questions),
        "additional_answers": list(case.additional_answers),
        "attachments": [
            {
                "kind": a.kind,
                "content_ref": a.content_ref,
                "reveal": a.reveal,
                "request_keywords": list(a.request_keywords),
            }
            for a in case.attachments
        ],
        "diagnosis": {"texts": list(case.diagnosis_texts), "icd10": list(case.icd10_codes)},
        "differential": list(case.differential),
        "num_steps": case.num_steps,
        "diagnostic_workup": _standard_to_json(case.workup_standard),
        "default_treatments": treatments,
        "complex_test_cases": list(case.complex_variants),
        "patient_archetype": case.patient_archetype,
        "archetype_params": case.archetype_params,
        "error_test_spec": (
            {
                "description": case.error_test_spec.description,
                "baseline_case_id": case.error_test_spec.baseline_case_id,
                "reference_transcript": case.error_test_spec.reference_transcript,
                "expected_deltas": case.error_test_spec.expected_deltas,
                "tolerance": case.error_test_spec.tolerance,
            }
            if case.error_test_spec else None
        ),
        "trap_rule": (
            {
                "require_critical": case.trap_rule.require_critical,
                "require_diagnosis": case.trap_rule.require_diagnosis,
                "forbid_step_flag": case.trap_rule.forbid_step_flag,
                "max_steps": case.trap_rule.max_steps,
            }
            if case.trap_rule else None
        ),
        "provenance": case.provenance,
    }
    return obj


def canonical_case_bytes(obj: dict) -> bytes:
    return (json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=False) + "\n").encode("utf-8")


def expand_variants(case: CaseRecord) -> list[CaseRecord]:
    """Materialize complex variants as standalone cases (id suffixed).

    A variant is a partial case-file dict; unspecified fields inherit from
    the parent. Category always inherits.
    """
    out = []
    base = case_to_json(case)
    for i, delta in enumerate(case.complex_variants):
        merged = dict(base)
        merged.update(delta)
        merged["category"] = case.category
        merged["complex_test_cases"] = []
        merged["id"] = delta.get("id", f"{case.id}/variant-{i + 1}")
        out.append(case_from_json(merged))
    return out


# ---------------------------------------------------------------------------
# Bank

@dataclass
class CaseBank:
    """Immutable, indexed collection of validated cases."""

    cases: dict[str, CaseRecord]
    root: Path | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.by_category: dict[str, list[CaseRecord]] = {}
        self.by_scope: dict[str, list[CaseRecord]] = {}
        self.by_tag: dict[str, list[CaseRecord]] = {}
        for case in self.cases.values():
            self.by_category.setdefault(case.category, []).append(case)
            for s in case.scopes:
                self.by_scope.setdefault(s, []).append(case)
            for t in case.tags:
                self.by_tag.setdefault(t, []).append(case)

    def __len__(self) -> int:
        return len(self.cases)

    def get(self, case_id: str) -> CaseRecord:
        return self.cases[case_id]

    def clinical_cases(self) -> list[CaseRecord]:
        """Cases eligible for execution: not Technical, not ErrorTests."""
        return [
            c for c in self.cases.values()
            if not c.is_technical() and c.category != "ErrorTests"
        ]

    def error_cases(self) -> list[CaseRecord]:
        return [c for c in self.cases.values() if c.category == "ErrorTests"]

    def resolve_path(self, rel: str) -> Path:
        if self.root is None:
            raise ValueError("bank has no backing directory")
        return self.root / rel


def load_cases(directory: str | Path) -> tuple[dict[str, CaseRecord], dict]:
    """Parse every case file in a bank directory, without validation.
    Used by validation reporting; everything else goes through load_bank."""
    root = Path(directory)
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    files = manifest.get("cases")
    if files is None:
        files = sorted(p.name for p in root.glob("*.case.json"))
    cases: dict[str, CaseRecord] = {}
    for fname in files:
        case = case_from_json(json.loads((root / fname).read_text()))
        if case.id in cases:
            raise ValueError(f"duplicate case id {case.id!r}")
        cases[case.id] = case
    return cases, manifest


def load_bank(directory: str | Path, strict: bool = True) -> CaseBank:
    """Load a bank directory (case files + manifest.json).

    Every case must validate before inclusion; in strict mode a violation
    aborts the load, otherwise offending cases are dropped.
    """
    cases, manifest = load_cases(directory)
    validated: dict[str, CaseRecord] = {}
    for case in cases.values():
        report = validate_case(case)
        if not report.ok:
            if strict:
                raise ValueError(f"{case.id}: {report.violations}")
            continue
        validated[case.id] = case
    return CaseBank(cases=validated, root=Path(directory), metadata=manifest)


def validate_bank(bank: CaseBank) -> list[ValidationReport]:
    return [validate_case(c) for c in bank.cases.values()]


# ---------------------------------------------------------------------------
# Level-2 sampling

@dataclass
class CaseSet:
    case_ids: list[str]
    forced: list[str]
    notes: list[str] = field(default_factory=list)


LOW_SCORE_THRESHOLD = 70.0


def sample_level2(
    bank: CaseBank,
    per_category: int,
    prior: dict[str, float] | None = None,
    seed: int = 0,
) -> CaseSet:
    """Per clinical category: force every case that previously scored below
    70, then fill with a uniform draw up to ``per_category``. Technical
    scopes and ErrorTests never run. Deterministic for a given seed.
    """
    if per_category < 0:
        raise ValueError("per_category must be >= 0")
    prior = prior or {}
    rng = random.Random(seed)
    chosen: list[str] = []
    forced: list[str] = []
    notes: list[str] = []
    for category in CATEGORIES:
        if category == "ErrorTests":
            continue
        pool = [c for c in bank.by_category.get(category, []) if not c.is_technical()]
        if not pool:
            notes.append(f"{category}: no cases")
            continue
        pool = sorted(pool, key=lambda c: c.id)
        must = [c.id for c in pool if prior.get(c.id, 100.0) < LOW_SCORE_THRESHOLD]
        rest = [c.id for c in pool if c.id not in must]
        fill = max(0, per_category - len(must))
        sampled = rng.sample(rest, min(fill, len(rest)))
        forced.extend(must)
        chosen.extend(must + sorted(sampled))
    return CaseSet(case_ids=chosen, forced=forced, notes=notes)


def prior_score(records: dict[str, float] | None, case_id: str) -> float | None:
    return (records or {}).get(case_id)


def composite_prior(dots: dict[str, float]) -> float:
    """Prior score used for Level-2 forcing: the minimum of the diagnosis,
    treatment and workup metrics — the most conservative reading of
    'scored below 70'."""
    keys = ("diagnosis_accuracy", "treatment_accuracy", "diagnostic_accuracy")
    vals = [dots[k] for k in keys if k in dots]
    return min(vals) if vals else 100.0


# ---------------------------------------------------------------------------
# Distribution report

@dataclass
class FacetReport:
    proportions: dict[str, float]
    bands: dict[str, tuple[float, float] | None]
    in_band: dict[str, bool | None]


@dataclass
class DistributionReport:
    total_cases: int
    category: FacetReport
    sex: FacetReport
    age_group: FacetReport


def _facet(counts: dict[str, int], bands: dict[str, tuple[float, float]] | None = None) -> FacetReport:
    total = sum(counts.values())
    props = {k: (100.0 * n / total if total else 0.0) for k, n in counts.items()}
    bands = bands or {}
    in_band: dict[str, bool | None] = {}
    band_out: dict[str, tuple[float, float] | None] = {}
    for k, p in props.items():
        band = bands.get(k)
        band_out[k] = band
        in_band[k] = (band[0] <= p <= band[1]) if band else None
    return FacetReport(proportions=props, bands=band_out, in_band=in_band)


def distribution_report(bank: CaseBank) -> DistributionReport:
    """Category / sex / age proportions, each facet summing to 100%."""
    if not bank.cases:
        raise ValueError("bank is empty")
    cat_counts: dict[str, int] = {}
    sex_counts: dict[str, int] = {}
    age_counts: dict[str, int] = {}
    for case in bank.cases.values():
        cat_counts[case.category] = cat_counts.get(case.category, 0) + 1
        sex_counts[case.sex] = sex_counts.get(case.sex, 0) + 1
        age = case.age_group
        if age is not None:
            age_counts[age] = age_counts.get(age, 0) + 1
    return DistributionReport(
        total_cases=len(bank.cases),
        category=_facet(cat_counts, CATEGORY_TARGET_BANDS),
        sex=_facet(sex_counts),
        age_group=_facet(age_counts),
    )


_norm_re = re.compile(r"[^a-z0-9 ]+")


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace. Shared by all
    deterministic text matching."""
    return " ".join(_norm_re.sub(" ", text.lower()).split())
