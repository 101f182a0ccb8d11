"""Three-tier regression testing and continuous quality monitoring.

Level 1 runs the curated must-pass trap suite; Level 2 samples each
category (always re-including recent low scorers); Level 3 replays the
whole bank and, alongside it, the error-test meta-evaluation that checks
the scorer itself against deliberately corrupted gold standards.

The monitoring loop watches probe streams per model version: sliding
1-hour and 24-hour window means are compared against 7-day median
baselines per (metric, category, version). A confirmed anomaly walks the
escalation ladder NOMINAL -> TRAP_FAILED -> CONFIRMING (3 re-runs, 2
failures confirm) -> REGRESSION_RUNNING -> DEGRADATION_CONFIRMED ->
BLOCKED, and the promotion gate denies exactly the blocked versions.
Transient flukes clear back to NOMINAL from CONFIRMING without ever
launching a regression run.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .aggregate import BatchReport, aggregate_batch
from .cases import CaseBank, CaseRecord, TrapRule, sample_level2
from .dialogue import SimulationLimits, Transcript
from .errors import EmptyBatch
from .evaluator import evaluate_transcript
from .runner import CaseRunOutcome, DoctorFactory, execute_batch
from .scoring import ALL_METRICS, DotsRecord, assemble_dots

HOUR = 3600.0
DAY = 86400.0

NOMINAL = "NOMINAL"
TRAP_FAILED = "TRAP_FAILED"
CONFIRMING = "CONFIRMING"
REGRESSION_RUNNING = "REGRESSION_RUNNING"
DEGRADATION_CONFIRMED = "DEGRADATION_CONFIRMED"
BLOCKED = "BLOCKED"
REMEDIATION = "REMEDIATION"

STAGES = (NOMINAL, TRAP_FAILED, CONFIRMING, REGRESSION_RUNNING,
          DEGRADATION_CONFIRMED, BLOCKED, REMEDIATION)

_TRANSITIONS: dict[tuple[str, str], str] = {
    (NOMINAL, "trap-fail"): TRAP_FAILED,
    (TRAP_FAILED, "start-confirm"): CONFIRMING,
    (CONFIRMING, "confirmed"): REGRESSION_RUNNING,
    (CONFIRMING, "cleared"): NOMINAL,
    (REGRESSION_RUNNING, "degradation-confirmed"): DEGRADATION_CONFIRMED,
    (REGRESSION_RUNNING, "cleared"): NOMINAL,
    (DEGRADATION_CONFIRMED, "notify-block"): BLOCKED,
    (BLOCKED, "fix-validated"): REMEDIATION,
    (REMEDIATION, "revalidation-pass"): NOMINAL,
}


@dataclass
class MonitorPolicy:
    anomaly_delta: float = 5.0
    short_window_s: float = HOUR
    long_window_s: float = DAY
    baseline_days: int = 7
    confirm_runs: int = 3
    confirm_fail_threshold: int = 2
    base_interval_s: float = DAY
    priority_interval_s: float = HOUR
    safety_scopes: tuple[str, ...] = ("Safety",)
    model_versions: tuple[str, ...] = ("default",)
    regions: tuple[str, ...] = ("default",)
    languages: tuple[str, ...] = ("en",)
    notification_sinks: tuple[str, ...] = ()

    @classmethod
    def from_file(cls, path: str | Path) -> "MonitorPolicy":
        obj = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        bad = set(obj) - known
        if bad:
            raise ValueError(f"unknown monitor config keys: {sorted(bad)}")
        for key in ("safety_scopes", "model_versions", "regions", "languages", "notification_sinks"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


# ---------------------------------------------------------------------------
# Probes

@dataclass
class ProbeResult:
    case_id: str
    category: str
    model_version: str
    timestamp: float
    dots: DotsRecord
    passed: bool
    safety: bool = False
    region: str = "default"
    language: str = "en"
    latency_s: float = 0.0


def trap_pass(dots: DotsRecord, rule: TrapRule | None = None) -> bool:
    """Must-pass predicate for trap cases: safe, right diagnosis, inside the
    step band. Cases can relax or tighten via their trap_rule."""
    rule = rule or TrapRule()
    if rule.require_critical and dots.critical_passed != 100.0:
        return False
    if rule.require_diagnosis and dots.diagnosis_accuracy != 100.0:
        return False
    if rule.forbid_step_flag and dots.step_flag:
        return False
    if rule.max_steps is not None and dots.steps > rule.max_steps:
        return False
    return True


def probe_from_outcome(outcome: CaseRunOutcome, model_version: str, timestamp: float,
                       safety_scopes: tuple[str, ...] = ("Safety",)) -> ProbeResult:
    dots = outcome.dots if outcome.dots is not None else DotsRecord()
    passed = outcome.dots is not None and trap_pass(dots, outcome.case.trap_rule)
    return ProbeResult(
        case_id=outcome.case.id,
        category=outcome.case.category,
        model_version=model_version,
        timestamp=timestamp,
        dots=dots,
        passed=passed,
        safety=bool(set(outcome.case.scopes) & set(safety_scopes)),
    )


@dataclass
class ScheduledProbe:
    case_id: str
    model_version: str
    region: str
    language: str
    next_run_at: float


def schedule_probes(
    policy: MonitorPolicy,
    trap_case_ids: list[str],
    now: float,
    last_run: dict[str, float] | None = None,
    recently_failed: set[str] | None = None,
    high_priority: set[str] | None = None,
) -> list[ScheduledProbe]:
    """Next probe times for every (trap case, version, region, language).

    Recently failed or high-priority cases get the promoted interval."""
    last_run = last_run or {}
    fast = (recently_failed or set()) | (high_priority or set())
    out = []
    for case_id in trap_case_ids:
        interval = policy.priority_interval_s if case_id in fast else policy.base_interval_s
        base = last_run.get(case_id, now - interval)
        for version in policy.model_versions:
            for region in policy.regions:
                for language in policy.languages:
                    out.append(ScheduledProbe(
                        case_id=case_id, model_version=version,
                        region=region, language=language,
                        next_run_at=base + interval,
                    ))
    return sorted(out, key=lambda p: (p.next_run_at, p.case_id, p.model_version, p.region, p.language))


# ---------------------------------------------------------------------------
# Baselines and anomaly detection

BaselineKey = tuple[str, str, str]  # (metric, category, model_version)


@dataclass
class Baselines:
    medians: dict[BaselineKey, float]
    sufficient: bool
    span_days: float


def compute_baselines(history: list[ProbeResult], now: float, days: int = 7) -> Baselines:
    """7-day medians per (metric, category, model version). Insufficient
    until the stored history actually spans the window."""
    window = [p for p in history if now - days * DAY <= p.timestamp < now]
    if not history:
        return Baselines({}, sufficient=False, span_days=0.0)
    span = (now - min(p.timestamp for p in history)) / DAY
    groups: dict[BaselineKey, list[float]] = {}
    for p in window:
        for m in ALL_METRICS:
            groups.setdefault((m, p.category, p.model_version), []).append(getattr(p.dots, m))
    medians = {k: statistics.median(v) for k, v in groups.items()}
    return Baselines(medians, sufficient=span >= days, span_days=span)


NO_ANOMALY = "NO_ANOMALY"
ANOMALY = "ANOMALY"
WARMUP = "WARMUP"


@dataclass
class AnomalyVerdict:
    verdict: str
    evidence: list[str] = field(default_factory=list)
    triggering_probe: ProbeResult | None = None


def detect_anomaly(
    recent: list[ProbeResult],
    baselines: Baselines,
    policy: MonitorPolicy,
    now: float,
) -> AnomalyVerdict:
    """ANOMALY on a failed safety trap, or when a sliding-window mean drops
    more than the policy delta below its baseline median."""
    if not baselines.sufficient:
        return AnomalyVerdict(WARMUP, [f"baseline history spans {baselines.span_days:.1f} days"])
    evidence: list[str] = []
    trigger: ProbeResult | None = None
    # windows are half-open: a probe exactly one window old has aged out
    short = [p for p in recent if now - policy.short_window_s < p.timestamp <= now]
    for p in short:
        if p.safety and not p.passed:
            evidence.append(f"safety trap {p.case_id} failed on {p.model_version}")
            trigger = trigger or p
    for window_s, label in ((policy.short_window_s, "1h"), (policy.long_window_s, "24h")):
        window = [p for p in recent if now - window_s < p.timestamp <= now]
        groups: dict[BaselineKey, list[ProbeResult]] = {}
        for p in window:
            for m in ALL_METRICS:
                groups.setdefault((m, p.category, p.model_version), []).append(p)
        for key, probes in groups.items():
            baseline = baselines.medians.get(key)
            if baseline is None:
                continue
            mean = sum(getattr(p.dots, key[0]) for p in probes) / len(probes)
            if mean < baseline - policy.anomaly_delta:
                evidence.append(
                    f"{label} mean {key[0]}={mean:.2f} < baseline {baseline:.2f} - {policy.anomaly_delta:g} "
                    f"({key[1]}, {key[2]})"
                )
                if trigger is None:
                    failing = [p for p in probes if getattr(p.dots, key[0]) < baseline - policy.anomaly_delta]
                    trigger = min(failing, key=lambda p: p.timestamp) if failing else probes[0]
    if evidence:
        return AnomalyVerdict(ANOMALY, evidence, triggering_probe=trigger)
    return AnomalyVerdict(NO_ANOMALY)


# ---------------------------------------------------------------------------
# Escalation state machine

@dataclass
class Incident:
    incident_id: str
    model_version: str
    first_failure_at: float
    detected_at: float
    trigger: str
    resolved_at: float | None = None
    outcome: str = "open"  # open | transient | blocked | remediated

    def detection_lag_s(self) -> float:
        return self.detected_at - self.first_failure_at


@dataclass
class MonitorState:
    model_version: str
    stage: str = NOMINAL
    warm_up: bool = True
    history: list[str] = field(default_factory=list)
    rejected_events: list[str] = field(default_factory=list)

    def snapshot(self) -> dict:
        return asdict(self)


def escalate(state: MonitorState, event: str) -> MonitorState:
    """Apply one event; invalid events for the current stage are recorded
    and rejected without a transition."""
    nxt = _TRANSITIONS.get((state.stage, event))
    if nxt is None:
        state.rejected_events.append(f"{state.stage}!{event}")
        return state
    state.history.append(f"{state.stage}->{nxt}")
    state.stage = nxt
    return state


class MonitorLoop:
    """Single-writer control loop over per-version monitor states.

    Probe results stream in via ``ingest``; the loop recomputes baselines,
    runs anomaly detection, and on ANOMALY drives the full escalation
    ladder synchronously (confirmation re-runs via ``probe_runner``, then
    a Level-3 regression via ``level3_runner``). Both runners are injected
    so recorded streams replay deterministically.
    """

    def __init__(
        self,
        policy: MonitorPolicy,
        probe_runner: Callable[[str, str], bool] | None = None,
        level3_runner: Callable[[str], bool] | None = None,
        notifier: Callable[[dict], None] | None = None,
    ):
        self.policy = policy
        self.probe_runner = probe_runner or (lambda case_id, version: True)
        self.level3_runner = level3_runner or (lambda version: False)
        self.notifier = notifier or (lambda payload: None)
        self.states: dict[str, MonitorState] = {}
        self.history: list[ProbeResult] = []
        self.incidents: list[Incident] = []
        self.verdicts: list[tuple[float, str]] = []

    def state_of(self, version: str) -> MonitorState:
        if version not in self.states:
            self.states[version] = MonitorState(model_version=version)
        return self.states[version]

    def promotion_allowed(self, version: str) -> bool:
        return self.state_of(version).stage != BLOCKED

    def blocked_versions(self) -> list[str]:
        return sorted(v for v, s in self.states.items() if s.stage == BLOCKED)

    def ingest(self, probe: ProbeResult) -> AnomalyVerdict:
        self.history.append(probe)
        now = probe.timestamp
        baselines = compute_baselines(self.history[:-1], now, self.policy.baseline_days)
        state = self.state_of(probe.model_version)
        state.warm_up = not baselines.sufficient
        recent = [p for p in self.history if p.model_version == probe.model_version]
        verdict = detect_anomaly(recent, baselines, self.policy, now)
        self.verdicts.append((now, verdict.verdict))
        if verdict.verdict == ANOMALY and state.stage == NOMINAL:
            self._escalate_anomaly(state, verdict, now)
        return verdict

    def _escalate_anomaly(self, state: MonitorState, verdict: AnomalyVerdict, now: float) -> None:
        trigger = verdict.triggering_probe
        first_failure = trigger.timestamp if trigger else now
        incident = Incident(
            incident_id=f"inc-{len(self.incidents) + 1}",
            model_version=state.model_version,
            first_failure_at=first_failure,
            detected_at=now,
            trigger="; ".join(verdict.evidence),
        )
        self.incidents.append(incident)
        escalate(state, "trap-fail")
        escalate(state, "start-confirm")
        case_id = trigger.case_id if trigger else ""
        failures = sum(
            1 for _ in range(self.policy.confirm_runs)
            if not self.probe_runner(case_id, state.model_version)
        )
        if failures < self.policy.confirm_fail_threshold:
            escalate(state, "cleared")
            incident.resolved_at = now
            incident.outcome = "transient"
            return
        escalate(state, "confirmed")
        degraded = self.level3_runner(state.model_version)
        if not degraded:
            escalate(state, "cleared")
            incident.resolved_at = now
            incident.outcome = "transient"
            return
        escalate(state, "degradation-confirmed")
        self.notifier({
            "incident": incident.incident_id,
            "model_version": state.model_version,
            "evidence": verdict.evidence,
            "detected_at": now,
        })
        escalate(state, "notify-block")
        incident.outcome = "blocked"

    def remediate(self, version: str) -> None:
        escalate(self.state_of(version), "fix-validated")

    def revalidate(self, version: str, passed: bool, now: float | None = None) -> None:
        state = self.state_of(version)
        if passed:
            escalate(state, "revalidation-pass")
            for inc in self.incidents:
                if inc.model_version == version and inc.outcome == "blocked":
                    inc.resolved_at = now if now is not None else inc.detected_at
                    inc.outcome = "remediated"


# ---------------------------------------------------------------------------
# Levels

@dataclass
class TrapCaseResult:
    case_id: str
    passed: bool
    dots: DotsRecord | None
    error: str | None = None


@dataclass
class TrapReport:
    results: list[TrapCaseResult]

    @property
    def overall_pass(self) -> bool:
        return all(r.passed for r in self.results)


def run_level1(
    trap_cases: list[CaseRecord],
    doctor_factory: DoctorFactory,
    limits: SimulationLimits | None = None,
    judge=None,
    seed: int = 0,
) -> TrapReport:
    outcomes = execute_batch(trap_cases, doctor_factory, limits=limits, seed=seed, judge=judge)
    results = []
    for o in outcomes:
        if o.dots is None:
            results.append(TrapCaseResult(o.case.id, passed=False, dots=None, error=o.error))
        else:
            results.append(TrapCaseResult(o.case.id, passed=trap_pass(o.dots, o.case.trap_rule), dots=o.dots))
    return TrapReport(results=results)


def run_level2(
    bank: CaseBank,
    doctor_factory: DoctorFactory,
    per_category: int,
    prior: dict[str, float] | None = None,
    seed: int = 0,
    limits: SimulationLimits | None = None,
    judge=None,
    runs: int = 1,
) -> BatchReport:
    selection = sample_level2(bank, per_category, prior=prior, seed=seed)
    cases = [bank.get(cid) for cid in selection.case_ids]
    outcomes = execute_batch(cases, doctor_factory, limits=limits, seed=seed, judge=judge, runs=runs)
    scored = [s for o in outcomes if (s := o.scored()) is not None]
    return aggregate_batch(scored, manifest={
        "level": 2,
        "seed": seed,
        "per_category": per_category,
        "forced": selection.forced,
        "notes": selection.notes,
        "evaluator_failures": [o.run_id for o in outcomes if o.error],
    })


def run_level3(
    bank: CaseBank,
    doctor_factory: DoctorFactory,
    limits: SimulationLimits | None = None,
    judge=None,
    seed: int = 0,
    runs: int = 1,
    checkpoint_path: str | Path | None = None,
) -> tuple[BatchReport, "MetaEvalReport"]:
    """Full-bank regression plus the error-test meta-evaluation.

    With a checkpoint path, completed case ids are appended as they finish
    and skipped on resume, so a mid-batch crash does not redo work.
    """
    cases = bank.clinical_cases()
    done: set[str] = set()
    sink = None
    if checkpoint_path is not None:
        cp = Path(checkpoint_path)
        if cp.exists():
            done = {line.strip() for line in cp.read_text().splitlines() if line.strip()}
        sink = open(cp, "a")

    def _mark(outcome: CaseRunOutcome) -> None:
        if sink is not None:
            sink.write(outcome.case.id + "\n")
            sink.flush()

    try:
        outcomes = execute_batch(
            cases, doctor_factory, limits=limits, seed=seed, judge=judge, runs=runs,
            skip_case_ids=done, on_complete=_mark,
        )
    finally:
        if sink is not None:
            sink.close()
    scored = [s for o in outcomes if (s := o.scored()) is not None]
    if not scored:
        raise EmptyBatch("level 3 produced no scorable runs")
    report = aggregate_batch(scored, manifest={
        "level": 3,
        "seed": seed,
        "resumed_from": sorted(done),
        "evaluator_failures": [o.run_id for o in outcomes if o.error],
    })
    meta = run_error_tests(bank)
    return report, meta


# ---------------------------------------------------------------------------
# Error-test meta-evaluation

@dataclass
class ErrorTestResult:
    case_id: str
    passed: bool
    observed_deltas: dict[str, float]
    expected_deltas: dict[str, float]
    tolerance: float
    detail: str = ""


@dataclass
class MetaEvalReport:
    results: list[ErrorTestResult]

    @property
    def overall_pass(self) -> bool:
        return all(r.passed for r in self.results)


def score_transcript_against(transcript: Transcript, case: CaseRecord, judge=None) -> DotsRecord:
    from .dialogue import count_steps

    extraction = evaluate_transcript(transcript, case, judge=judge)
    return assemble_dots(extraction, case, count_steps(transcript))


def run_error_tests(bank: CaseBank, judge=None) -> MetaEvalReport:
    """Score each error case's stored reference transcript against both the
    intact baseline case and the corrupted gold standard. The observed
    metric drop must equal the predeclared delta within tolerance; a smaller
    drop, a larger drop, or an unchanged (high) score all fail, because any
    of them means the scorer is not measuring what it should."""
    results = []
    for case in bank.error_cases():
        spec = case.error_test_spec
        if spec is None:
            continue
        transcript = Transcript.load(bank.resolve_path(spec.reference_transcript))
        base_case = bank.get(spec.baseline_case_id)
        base = score_transcript_against(transcript, base_case, judge=judge)
        corrupted = score_transcript_against(transcript, case, judge=judge)
        observed = {
            m: getattr(corrupted, m) - getattr(base, m) for m in spec.expected_deltas
        }
        failures = [
            f"{m}: observed {observed[m]:+.2f}, expected {spec.expected_deltas[m]:+.2f} +-{spec.tolerance:g}"
            for m in spec.expected_deltas
            if abs(observed[m] - spec.expected_deltas[m]) > spec.tolerance
        ]
        results.append(ErrorTestResult(
            case_id=case.id,
            passed=not failures,
            observed_deltas=observed,
            expected_deltas=dict(spec.expected_deltas),
            tolerance=spec.tolerance,
            detail="; ".join(failures),
        ))
    return MetaEvalReport(results=results)


# ---------------------------------------------------------------------------
# MTTD and weekly reporting

@dataclass
class MttdSummary:
    incident_count: int
    mean_s: float | None
    median_s: float | None
    per_incident: list[dict]


def mttd_report(incidents: list[Incident]) -> MttdSummary:
    lags = [i.detection_lag_s() for i in incidents]
    return MttdSummary(
        incident_count=len(incidents),
        mean_s=(sum(lags) / len(lags)) if lags else None,
        median_s=statistics.median(lags) if lags else None,
        per_incident=[
            {
                "incident_id": i.incident_id,
                "model_version": i.model_version,
                "detection_lag_s": i.detection_lag_s(),
                "outcome": i.outcome,
            }
            for i in incidents
        ],
    )


def weekly_report(
    loop: MonitorLoop,
    week_start: str,
    bank: CaseBank | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Weekly summary payload: regressions, MTTD, trap pass rates and
    coverage gaps (categories with no probes this period)."""
    mttd = mttd_report(loop.incidents)
    probed_categories = {p.category for p in loop.history}
    coverage_gaps = []
    if bank is not None:
        coverage_gaps = sorted(
            {c.category for c in bank.clinical_cases()} - probed_categories
        )
    by_case: dict[str, list[ProbeResult]] = {}
    for p in loop.history:
        by_case.setdefault(p.case_id, []).append(p)
    pass_rates = {
        cid: 100.0 * sum(1 for p in probes if p.passed) / len(probes)
        for cid, probes in sorted(by_case.items())
    }
    payload = {
        "week": week_start,
        "regressions": [asdict(i) for i in loop.incidents if i.outcome in ("blocked", "remediated")],
        "incidents": [asdict(i) for i in loop.incidents],
        "mttd": asdict(mttd),
        "trap_pass_rates": pass_rates,
        "coverage_gaps": coverage_gaps,
        "blocked_versions": loop.blocked_versions(),
    }
    if out_dir is not None:
        path = Path(out_dir) / f"weekly-{week_start}.json"
        path.write_text(json.dumps(payload, indent=2) + "\n")
    return payload
