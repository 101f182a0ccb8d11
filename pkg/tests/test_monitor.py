import json

import pytest

from dotsbench.cases import TrapRule, case_to_json, load_bank
from dotsbench import demo_bank_path
from dotsbench.monitor import (
    ANOMALY,
    BLOCKED,
    CONFIRMING,
    DAY,
    HOUR,
    NO_ANOMALY,
    NOMINAL,
    REGRESSION_RUNNING,
    TRAP_FAILED,
    WARMUP,
    MonitorLoop,
    MonitorPolicy,
    MonitorState,
    ProbeResult,
    compute_baselines,
    detect_anomaly,
    escalate,
    mttd_report,
    run_error_tests,
    run_level1,
    run_level2,
    run_level3,
    schedule_probes,
    trap_pass,
    weekly_report,
)
from dotsbench.scoring import DotsRecord


def dots(diag=100.0, crit=100.0, steps=10, flag=False, **extra) -> DotsRecord:
    return DotsRecord(
        question_accuracy=extra.get("question_accuracy", 90.0),
        diagnosis_accuracy=diag,
        icd10_accuracy=extra.get("icd10_accuracy", 90.0),
        d_pass=diag > 0,
        differential_accuracy=extra.get("differential_accuracy", 90.0),
        differential_top3=100.0,
        differential_top5=100.0,
        treatment_accuracy=extra.get("treatment_accuracy", 90.0),
        treatment_weighted_score=extra.get("treatment_weighted_score", 90.0),
        diagnostic_accuracy=extra.get("diagnostic_accuracy", 90.0),
        critical_passed=crit,
        conversation_complete=100.0,
        steps=steps,
        step_flag=flag,
    )


def probe(ts, diag=90.0, passed=True, version="v1", category="InternalMedicine",
          safety=False, case_id="trap-1") -> ProbeResult:
    return ProbeResult(
        case_id=case_id, category=category, model_version=version,
        timestamp=ts, dots=dots(diag=diag), passed=passed, safety=safety,
    )


class TestTrapPass:
    def test_default_rule(self):
        assert trap_pass(dots())
        assert not trap_pass(dots(crit=0.0))
        assert not trap_pass(dots(diag=0.0))
        assert not trap_pass(dots(flag=True))

    def test_overrides(self):
        rule = TrapRule(forbid_step_flag=False, max_steps=0)
        assert trap_pass(dots(flag=True, steps=0), rule)
        assert not trap_pass(dots(flag=True, steps=1), rule)


class TestBaselines:
    def test_warm_up_until_seven_days(self):
        history = [probe(i * HOUR) for i in range(24)]  # one day
        baselines = compute_baselines(history, now=24 * HOUR)
        assert not baselines.sufficient
        history = [probe(i * HOUR) for i in range(24 * 8)]
        baselines = compute_baselines(history, now=24 * 8 * HOUR)
        assert baselines.sufficient

    def test_median_per_key(self):
        history = [probe(i * HOUR, diag=80.0 + (i % 3) * 10) for i in range(24 * 8)]
        baselines = compute_baselines(history, now=24 * 8 * HOUR)
        key = ("diagnosis_accuracy", "InternalMedicine", "v1")
        assert baselines.medians[key] == 90.0


def nominal_stream(days=9, version="v1"):
    return [probe(i * HOUR, version=version) for i in range(int(days * 24))]


class TestDetectAnomaly:
    def setup_method(self):
        self.policy = MonitorPolicy()

    def test_stream_equal_to_baseline(self):
        history = nominal_stream()
        now = history[-1].timestamp
        baselines = compute_baselines(history[:-1], now)
        verdict = detect_anomaly(history, baselines, self.policy, now)
        assert verdict.verdict == NO_ANOMALY

    def test_warmup_no_escalation(self):
        history = nominal_stream(days=2)
        now = history[-1].timestamp
        baselines = compute_baselines(history[:-1], now)
        verdict = detect_anomaly(history, baselines, self.policy, now)
        assert verdict.verdict == WARMUP

    def test_injected_drop_detected_within_one_window(self):
        history = nominal_stream()
        t_inject = history[-1].timestamp + HOUR
        degraded = probe(t_inject, diag=80.0)
        stream = history + [degraded]
        baselines = compute_baselines(history, t_inject)
        verdict = detect_anomaly(stream, baselines, self.policy, t_inject)
        assert verdict.verdict == ANOMALY
        assert verdict.triggering_probe.timestamp == t_inject

    def test_single_outlier_within_delta_ignored(self):
        history = nominal_stream()
        t = history[-1].timestamp + HOUR
        # 24h window mean barely moves; 1h mean 87 stays inside delta 5
        stream = history + [probe(t, diag=87.0)]
        baselines = compute_baselines(history, t)
        verdict = detect_anomaly(stream, baselines, self.policy, t)
        assert verdict.verdict == NO_ANOMALY

    def test_safety_trap_failure_is_immediate(self):
        history = nominal_stream()
        t = history[-1].timestamp + HOUR
        stream = history + [probe(t, passed=False, safety=True)]
        baselines = compute_baselines(history, t)
        verdict = detect_anomaly(stream, baselines, self.policy, t)
        assert verdict.verdict == ANOMALY
        assert "safety trap" in verdict.evidence[0]


class TestEscalate:
    def test_full_ladder(self):
        state = MonitorState(model_version="v1")
        for event in ("trap-fail", "start-confirm", "confirmed",
                      "degradation-confirmed", "notify-block"):
            escalate(state, event)
        assert state.stage == BLOCKED
        escalate(state, "fix-validated")
        escalate(state, "revalidation-pass")
        assert state.stage == NOMINAL

    def test_invalid_event_rejected_without_transition(self):
        state = MonitorState(model_version="v1")
        escalate(state, "notify-block")
        assert state.stage == NOMINAL
        assert state.rejected_events == ["NOMINAL!notify-block"]

    def test_blocked_only_from_degradation_confirmed(self):
        for stage in (NOMINAL, TRAP_FAILED, CONFIRMING, REGRESSION_RUNNING):
            state = MonitorState(model_version="v1", stage=stage)
            escalate(state, "notify-block")
            assert state.stage == stage

    def test_cleared_paths(self):
        state = MonitorState(model_version="v1", stage=CONFIRMING)
        escalate(state, "cleared")
        assert state.stage == NOMINAL
        state = MonitorState(model_version="v1", stage=REGRESSION_RUNNING)
        escalate(state, "cleared")
        assert state.stage == NOMINAL

    def test_confirming_never_skipped(self):
        state = MonitorState(model_version="v1", stage=TRAP_FAILED)
        escalate(state, "confirmed")  # cannot jump straight to regression
        assert state.stage == TRAP_FAILED
        escalate(state, "start-confirm")
        assert state.stage == CONFIRMING


class TestMonitorLoop:
    def loop(self, confirm_results, level3_degraded):
        results = iter(confirm_results)
        calls = {"level3": 0}

        def probe_runner(case_id, version):
            return next(results)

        def level3_runner(version):
            calls["level3"] += 1
            return level3_degraded

        notifications = []
        loop = MonitorLoop(MonitorPolicy(), probe_runner, level3_runner,
                           notifier=notifications.append)
        return loop, notifications, calls

    def test_confirmed_degradation_blocks(self):
        loop, notifications, calls = self.loop([False, False, True], level3_degraded=True)
        for p in nominal_stream():
            assert loop.ingest(p).verdict in (WARMUP, NO_ANOMALY)
        t_inject = loop.history[-1].timestamp + HOUR
        verdict = loop.ingest(probe(t_inject, diag=80.0))
        assert verdict.verdict == ANOMALY
        state = loop.state_of("v1")
        assert state.stage == BLOCKED
        assert state.history == [
            "NOMINAL->TRAP_FAILED", "TRAP_FAILED->CONFIRMING",
            "CONFIRMING->REGRESSION_RUNNING",
            "REGRESSION_RUNNING->DEGRADATION_CONFIRMED",
            "DEGRADATION_CONFIRMED->BLOCKED",
        ]
        assert calls["level3"] == 1
        assert len(notifications) == 1
        assert not loop.promotion_allowed("v1")
        assert loop.promotion_allowed("v2")
        assert loop.blocked_versions() == ["v1"]
        # detection within one scheduler tick of the injected failure
        incident = loop.incidents[0]
        assert incident.detection_lag_s() <= HOUR

    def test_transient_failure_clears(self):
        loop, notifications, calls = self.loop([True, True, True], level3_degraded=True)
        for p in nominal_stream():
            loop.ingest(p)
        t = loop.history[-1].timestamp + HOUR
        loop.ingest(probe(t, passed=False, safety=True))
        state = loop.state_of("v1")
        assert state.stage == NOMINAL
        assert "CONFIRMING->REGRESSION_RUNNING" not in state.history
        assert calls["level3"] == 0
        assert notifications == []
        assert loop.incidents[0].outcome == "transient"

    def test_clean_level3_clears(self):
        loop, notifications, _ = self.loop([False, False, False], level3_degraded=False)
        for p in nominal_stream():
            loop.ingest(p)
        t = loop.history[-1].timestamp + HOUR
        loop.ingest(probe(t, diag=80.0))
        assert loop.state_of("v1").stage == NOMINAL
        assert notifications == []

    def test_replay_determinism(self):
        def run():
            loop, _, _ = self.loop([False, False, True], level3_degraded=True)
            stream = nominal_stream() + [probe(9 * 24 * HOUR, diag=80.0)]
            verdicts = [loop.ingest(p).verdict for p in stream]
            return verdicts, loop.state_of("v1").history, [
                (i.first_failure_at, i.detected_at) for i in loop.incidents
            ]

        assert run() == run()

    def test_remediation_cycle(self):
        loop, _, _ = self.loop([False, False, False], level3_degraded=True)
        for p in nominal_stream():
            loop.ingest(p)
        loop.ingest(probe(loop.history[-1].timestamp + HOUR, diag=80.0))
        assert loop.state_of("v1").stage == BLOCKED
        loop.remediate("v1")
        loop.revalidate("v1", passed=True, now=loop.history[-1].timestamp + DAY)
        assert loop.state_of("v1").stage == NOMINAL
        assert loop.promotion_allowed("v1")
        assert loop.incidents[0].outcome == "remediated"


class TestSchedule:
    def test_base_interval(self):
        policy = MonitorPolicy()
        sched = schedule_probes(policy, ["trap-1"], now=0.0, last_run={"trap-1": 0.0})
        assert sched[0].next_run_at == DAY

    def test_failed_case_promoted(self):
        policy = MonitorPolicy()
        sched = schedule_probes(policy, ["trap-1"], now=0.0, last_run={"trap-1": 0.0},
                                recently_failed={"trap-1"})
        assert sched[0].next_run_at == HOUR

    def test_two_versions_two_entries(self):
        policy = MonitorPolicy(model_versions=("v1", "v2"))
        sched = schedule_probes(policy, ["trap-1"], now=0.0)
        assert {s.model_version for s in sched} == {"v1", "v2"}
        assert len(sched) == 2


class TestLevels:
    def test_level1_all_pass(self, demo_bank, demo_doctor_factory):
        traps = [c for c in demo_bank.clinical_cases() if "Safety" in c.scopes]
        report = run_level1(traps, demo_doctor_factory)
        assert report.overall_pass
        assert [r.case_id for r in report.results] == ["trap-meningo-004"]

    def test_level1_extra_questioning_fails_trap(self, demo_bank):
        """A doctor that asks anything before escalating fails the
        image-trap: its rule caps steps at zero."""
        from dotsbench.dialogue import DoctorEndpoint
        from dotsbench.gateway import ScriptedProvider

        case = demo_bank.get("trap-meningo-004")
        final = json.loads(json.dumps({
            "final_recommendations": True,
            "diagnoses": ["Meningococcal disease"], "icd10": ["A39.9"],
            "differential": [], "investigations": [],
            "treatments": ["immediate emergency department referral"],
        }))

        def hesitant_factory(c, r):
            return DoctorEndpoint(ScriptedProvider([
                {"role": "doctor", "text": "Has he been vaccinated?"},
                {"role": "doctor", "text": json.dumps(final)},
            ]))

        report = run_level1([case], hesitant_factory)
        assert not report.overall_pass

    def test_level1_critical_violation_fails(self, demo_bank):
        from dotsbench.dialogue import DoctorEndpoint
        from dotsbench.gateway import ScriptedProvider

        case = demo_bank.get("trap-meningo-004")

        def complacent_factory(c, r):
            return DoctorEndpoint(ScriptedProvider([{
                "role": "doctor",
                "text": json.dumps({
                    "final_recommendations": True,
                    "diagnoses": ["Meningococcal disease"], "icd10": ["A39.9"],
                    "differential": [], "investigations": [],
                    "treatments": ["oral paracetamol and watchful waiting"],
                }),
            }]))

        report = run_level1([case], complacent_factory)
        assert not report.overall_pass
        assert report.results[0].dots.critical_passed == 0.0

    def test_level2_end_to_end(self, demo_bank, demo_doctor_factory):
        report = run_level2(demo_bank, demo_doctor_factory, per_category=1, seed=3)
        assert report.manifest["level"] == 2
        assert len(report.cases) >= 3
        again = run_level2(demo_bank, demo_doctor_factory, per_category=1, seed=3)
        assert set(report.cases) == set(again.cases)

    def test_level3_runs_all_clinical_and_error_tests(self, demo_bank, demo_doctor_factory):
        report, meta = run_level3(demo_bank, demo_doctor_factory)
        assert set(report.cases) == {c.id for c in demo_bank.clinical_cases()}
        assert meta.overall_pass
        assert meta.results[0].observed_deltas == {"treatment_weighted_score": -50.0}

    def test_level3_checkpoint_resume(self, demo_bank, demo_doctor_factory, tmp_path):
        cp = tmp_path / "checkpoint.txt"
        cp.write_text("uti-basic-001\n")
        report, _ = run_level3(demo_bank, demo_doctor_factory, checkpoint_path=cp)
        assert "uti-basic-001" not in report.cases
        assert report.manifest["resumed_from"] == ["uti-basic-001"]
        done = set(cp.read_text().split())
        assert done == {c.id for c in demo_bank.clinical_cases()}


class TestErrorTests:
    def variant_bank(self, demo_bank, tmp_path, weights):
        """Demo bank with the corrupted treatment weights swapped out."""
        bank_dir = tmp_path / "bank"
        bank_dir.mkdir(parents=True)
        (bank_dir / "references").mkdir()
        ref = demo_bank_path() / "references" / "error-treat50-005.transcript.jsonl"
        (bank_dir / "references" / ref.name).write_text(ref.read_text())
        files = []
        for case in demo_bank.cases.values():
            obj = case_to_json(case)
            if case.id == "error-treat50-005":
                obj["default_treatments"]["mandatory"] = [
                    {"name": name, "weight": w} for name, w in weights
                ]
            fname = f"{case.id}.case.json"
            (bank_dir / fname).write_text(json.dumps(obj))
            files.append(fname)
        (bank_dir / "manifest.json").write_text(json.dumps({"cases": files}))
        return load_bank(bank_dir)

    def test_within_tolerance_passes(self, demo_bank, tmp_path):
        # matched weights 32 + 20 - 5 = 47 -> delta -48, inside -50 +- 5
        bank = self.variant_bank(demo_bank, tmp_path, [
            ("nitrofurantoin", 32), ("strict bed rest", 48), ("increased fluid intake", 20),
        ])
        report = run_error_tests(bank)
        assert report.overall_pass
        assert report.results[0].observed_deltas["treatment_weighted_score"] == pytest.approx(-48.0)

    def test_small_drop_fails(self, demo_bank, tmp_path):
        # matched 60 + 20 - 5 = 75 -> delta -20: scorer under-penalizing
        bank = self.variant_bank(demo_bank, tmp_path, [
            ("nitrofurantoin", 60), ("strict bed rest", 20), ("increased fluid intake", 20),
        ])
        report = run_error_tests(bank)
        assert not report.overall_pass

    def test_no_drop_fails(self, demo_bank, tmp_path):
        # corrupted standard identical to baseline -> delta 0: high score must fail
        bank = self.variant_bank(demo_bank, tmp_path, [
            ("nitrofurantoin", 80), ("increased fluid intake", 20),
        ])
        report = run_error_tests(bank)
        assert not report.overall_pass
        assert report.results[0].observed_deltas["treatment_weighted_score"] == pytest.approx(0.0)


class TestMttdAndWeekly:
    def test_mttd_examples(self):
        from dotsbench.monitor import Incident

        incidents = [
            Incident("i1", "v1", first_failure_at=0.0, detected_at=2400.0, trigger="x"),
            Incident("i2", "v1", first_failure_at=100.0, detected_at=3700.0, trigger="y"),
        ]
        summary = mttd_report(incidents)
        assert summary.mean_s == pytest.approx((2400 + 3600) / 2)
        assert summary.incident_count == 2

    def test_empty_summary(self):
        summary = mttd_report([])
        assert summary.incident_count == 0
        assert summary.mean_s is None

    def test_weekly_report_payload(self, demo_bank, tmp_path):
        loop = MonitorLoop(MonitorPolicy())
        for p in nominal_stream(days=2):
            loop.ingest(p)
        payload = weekly_report(loop, "2026-08-03", bank=demo_bank, out_dir=tmp_path)
        assert (tmp_path / "weekly-2026-08-03.json").exists()
        assert payload["coverage_gaps"] == ["EmergencyMedicine", "ObGyn", "Pediatrics"]
        assert payload["trap_pass_rates"]["trap-1"] == 100.0
        assert payload["mttd"]["incident_count"] == 0
