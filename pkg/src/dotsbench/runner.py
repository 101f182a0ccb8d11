"""End-to-end execution of cases: simulate, evaluate, score.

A batch executes independently per case-run on a bounded thread pool and
merges results in a deterministic order. A doctor failure yields a failed
transcript (scored, counting against completion); an evaluator failure is
a distinct outcome and excluded from scoring.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from .aggregate import ScoredRun
from .cases import CaseRecord
from .dialogue import DoctorEndpoint, SimulationLimits, Transcript, count_steps, run_simulation
from .errors import SchemaViolation
from .evaluator import ExtractionRecord, evaluate_transcript
from .gateway import Provider, RunLog
from .scoring import DotsRecord, assemble_dots

DEFAULT_BATCH_WORKERS = 16

# Builds a fresh doctor per (case, run index); scripted doctors are
# consumed by a single dialogue and cannot be shared.
DoctorFactory = Callable[[CaseRecord, int], DoctorEndpoint]


@dataclass
class CaseRunOutcome:
    case: CaseRecord
    run_id: str
    transcript: Transcript
    extraction: ExtractionRecord | None = None
    dots: DotsRecord | None = None
    error: str | None = None
    judge_log: RunLog | None = None  # judge prompts/outputs, archived for audit

    def scored(self) -> ScoredRun | None:
        if self.dots is None:
            return None
        return ScoredRun(
            case_id=self.case.id,
            category=self.case.category,
            dots=self.dots,
            expected_steps=self.case.num_steps,
            scopes=self.case.scopes,
        )


def execute_case(
    case: CaseRecord,
    doctor: DoctorEndpoint,
    limits: SimulationLimits | None = None,
    seed: int = 0,
    run_id: str | None = None,
    judge: Provider | None = None,
    patient_provider: Provider | None = None,
    out_dir=None,
) -> CaseRunOutcome:
    transcript = run_simulation(
        case, doctor, limits=limits, seed=seed, run_id=run_id,
        patient_provider=patient_provider, out_dir=out_dir,
    )
    judge_log = RunLog() if judge is not None else None
    try:
        extraction = evaluate_transcript(transcript, case, judge=judge, log=judge_log)
    except SchemaViolation as exc:
        return CaseRunOutcome(case=case, run_id=transcript.run_id, transcript=transcript,
                              error=f"evaluator-failed: {exc}", judge_log=judge_log)
    dots = assemble_dots(extraction, case, count_steps(transcript))
    return CaseRunOutcome(
        case=case, run_id=transcript.run_id, transcript=transcript,
        extraction=extraction, dots=dots, judge_log=judge_log,
    )


def execute_batch(
    cases: list[CaseRecord],
    doctor_factory: DoctorFactory,
    limits: SimulationLimits | None = None,
    runs: int = 1,
    seed: int = 0,
    judge: Provider | None = None,
    patient_provider: Provider | None = None,
    max_workers: int = DEFAULT_BATCH_WORKERS,
    skip_case_ids: set[str] | None = None,
    on_complete: Callable[[CaseRunOutcome], None] | None = None,
) -> list[CaseRunOutcome]:
    """Run every case ``runs`` times concurrently; results come back sorted
    by (case id, run index) regardless of completion order."""
    skip = skip_case_ids or set()
    jobs = [
        (case, r)
        for case in sorted(cases, key=lambda c: c.id)
        for r in range(runs)
        if case.id not in skip
    ]

    def _one(job: tuple[CaseRecord, int]) -> tuple[tuple[str, int], CaseRunOutcome]:
        case, r = job
        outcome = execute_case(
            case, doctor_factory(case, r), limits=limits, seed=seed + r,
            run_id=f"{case.id}-r{r}-s{seed + r}",
            judge=judge, patient_provider=patient_provider,
        )
        if on_complete is not None:
            on_complete(outcome)
        return (case.id, r), outcome

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = dict(pool.map(_one, jobs))
    return [results[key] for key in sorted(results)]
