"""Command line interface.

Batch commands talk to the run store directly; ``dots serve`` hosts the
HTTP API (human sessions, run queries, monitoring views, promotion gate).
Doctor endpoints are given as locators: ``scripted:<replay.json>`` for
deterministic offline runs, ``http(s):<url>`` for live endpoints, or
``env:`` to read the endpoint from DOTS_PROVIDER_URL.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path

import click

from . import __version__, demo_bank_path
from .aggregate import BatchReport, paired_compare, write_histogram_csv
from .cases import CaseBank, load_bank, distribution_report, sample_level2
from .dialogue import DoctorEndpoint, SimulationLimits, Transcript, count_steps
from .evaluator import evaluate_transcript
from .gateway import provider_from_spec
from .monitor import (
    MonitorLoop,
    MonitorPolicy,
    ProbeResult,
    mttd_report,
    probe_from_outcome,
    run_error_tests,
    run_level1,
    run_level2,
    run_level3,
    schedule_probes,
    weekly_report,
)
from .runner import execute_case
from .runstore import RunStore
from .scoring import DotsRecord, assemble_dots
from .service import persist_incident, persist_probe


def _bank(path: str | None) -> CaseBank:
    return load_bank(path or demo_bank_path())


def _doctor_factory(spec: str):
    def factory(case, run_index):
        locator = spec.replace("{case}", case.id)
        return DoctorEndpoint(provider_from_spec(locator), name=locator)

    return factory


def _print(obj) -> None:
    click.echo(json.dumps(obj, indent=2, default=str))


@click.group()
@click.version_option(__version__)
def main():
    """Dialogue-doctor evaluation harness."""


@main.command()
@click.option("--bank", "bank_dir", default=None, help="Case bank directory (default: packaged demo bank).")
@click.option("--distribution/--no-distribution", default=False, help="Also print the distribution report.")
def validate(bank_dir, distribution):
    """Validate every case in a bank."""
    from .cases import load_cases, validate_case

    cases, manifest = load_cases(bank_dir or demo_bank_path())
    bank = CaseBank(cases=cases, metadata=manifest)
    reports = [validate_case(c) for c in cases.values()]
    bad = [r for r in reports if not r.ok]
    for r in reports:
        status = "ok" if r.ok else "FAIL"
        click.echo(f"{r.case_id}: {status}")
        for v in r.violations:
            click.echo(f"  - {v}")
    if distribution:
        _print(asdict(distribution_report(bank)))
    click.echo(f"{len(reports) - len(bad)}/{len(reports)} cases valid")
    sys.exit(1 if bad else 0)


@main.command()
@click.option("--bank", "bank_dir", default=None)
@click.option("--case", "case_id", required=True)
@click.option("--doctor", "doctor_spec", required=True,
              help="scripted:<file> | http(s):<url> | env: ({case} expands to the case id).")
@click.option("--runs", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--max-steps", default=20, show_default=True)
@click.option("--store", "store_dir", default="store", show_default=True)
def simulate(bank_dir, case_id, doctor_spec, runs, seed, max_steps, store_dir):
    """Run simulations for one case and persist the transcripts."""
    bank = _bank(bank_dir)
    case = bank.get(case_id)
    store = RunStore(store_dir)
    factory = _doctor_factory(doctor_spec)
    limits = SimulationLimits(max_steps=max_steps)
    for r in range(runs):
        from .dialogue import run_simulation

        run_id = f"{case.id}-r{r}-s{seed + r}"
        transcript = run_simulation(case, factory(case, r), limits=limits, seed=seed + r, run_id=run_id)
        store.persist_run(
            run_id=run_id,
            kind="simulation",
            namespace="evaluation",
            artifacts={"transcript": "\n".join(transcript.to_json_lines()) + "\n"},
            model_version=doctor_spec,
            case_id=case.id,
        )
        click.echo(f"{run_id}: steps={count_steps(transcript)} "
                   f"complete={transcript.is_conversation_complete} reason={transcript.termination_reason}")


@main.command()
@click.option("--run", "run_id", required=True)
@click.option("--bank", "bank_dir", default=None)
@click.option("--store", "store_dir", default="store", show_default=True)
@click.option("--judge", "judge_spec", default=None, help="Optional judge provider locator.")
def evaluate(run_id, bank_dir, store_dir, judge_spec):
    """Extract and score a persisted run; commits a superseding envelope."""
    bank = _bank(bank_dir)
    store = RunStore(store_dir)
    env = store.get(run_id)
    transcript = _load_transcript_artifact(store, env)
    case = bank.get(env.case_id)
    judge = provider_from_spec(judge_spec) if judge_spec else None
    from .gateway import RunLog

    judge_log = RunLog() if judge is not None else None
    extraction = evaluate_transcript(transcript, case, judge=judge, log=judge_log)
    dots = assemble_dots(extraction, case, count_steps(transcript))
    n = sum(1 for e in store.query_runs() if e.meta.get("supersedes") == run_id)
    eval_id = f"{run_id}.eval{n + 1}"
    artifacts = {
        "transcript": "\n".join(transcript.to_json_lines()) + "\n",
        "extraction": json.dumps(extraction.to_json(), indent=2) + "\n",
        "dots": json.dumps(dots.to_json(), indent=2) + "\n",
    }
    if judge_log is not None:
        artifacts["judge"] = json.dumps(judge_log.to_json(), indent=2) + "\n"
    store.persist_run(
        run_id=eval_id,
        kind=env.kind,
        namespace=env.namespace,
        artifacts=artifacts,
        model_version=env.model_version,
        case_id=env.case_id,
        meta={"supersedes": run_id},
    )
    _print(dots.to_json())


def _load_transcript_artifact(store: RunStore, env) -> Transcript:
    raw = store.read_artifact(env, "transcript").decode("utf-8")
    lines = [json.loads(line) for line in raw.splitlines() if line.strip()]
    from .dialogue import Turn

    summary = lines[-1]
    return Transcript(
        case_id=summary["case_id"],
        run_id=summary["run_id"],
        turns=[Turn(**t) for t in lines[:-1]],
        is_conversation_complete=summary["is_conversation_complete"],
        termination_reason=summary["termination_reason"],
        provider_meta=summary.get("provider_meta", {}),
    )


@main.command()
@click.option("--level", type=click.Choice(["1", "2", "3"]), required=True)
@click.option("--bank", "bank_dir", default=None)
@click.option("--doctor", "doctor_spec", required=True)
@click.option("--per-category", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--runs", default=1, show_default=True)
@click.option("--store", "store_dir", default="store", show_default=True)
@click.option("--checkpoint", default=None, help="Level-3 resume checkpoint file.")
def batch(level, bank_dir, doctor_spec, per_category, seed, runs, store_dir, checkpoint):
    """Run a Level 1 trap suite, Level 2 sample, or Level 3 full regression."""
    bank = _bank(bank_dir)
    store = RunStore(store_dir)
    factory = _doctor_factory(doctor_spec)
    if level == "1":
        traps = [c for c in bank.clinical_cases() if "Safety" in c.scopes]
        report = run_level1(traps, factory, seed=seed)
        payload = {
            "overall_pass": report.overall_pass,
            "results": [
                {"case_id": r.case_id, "passed": r.passed, "error": r.error}
                for r in report.results
            ],
        }
        run_id = f"level1-s{seed}"
        store.persist_run(run_id=run_id, kind="level1", namespace="evaluation",
                          artifacts={"report": json.dumps(payload, indent=2) + "\n"},
                          model_version=doctor_spec)
        _print(payload)
        sys.exit(0 if report.overall_pass else 1)
    if level == "2":
        prior = _latest_priors(store)
        report = run_level2(bank, factory, per_category=per_category, prior=prior,
                            seed=seed, runs=runs)
        run_id = f"level2-s{seed}"
    else:
        report, meta = run_level3(bank, factory, seed=seed, runs=runs, checkpoint_path=checkpoint)
        run_id = f"level3-s{seed}"
        meta_payload = {
            "overall_pass": meta.overall_pass,
            "results": [asdict(r) for r in meta.results],
        }
        store.persist_run(run_id=f"{run_id}-errortests", kind="error-test", namespace="evaluation",
                          artifacts={"report": json.dumps(meta_payload, indent=2) + "\n"},
                          model_version=doctor_spec)
        click.echo(f"error tests: {'pass' if meta.overall_pass else 'FAIL'}")
    store.persist_run(run_id=run_id, kind=f"level{level}", namespace="evaluation",
                      artifacts={"report": json.dumps(report.to_json(), indent=2) + "\n"},
                      model_version=doctor_spec)
    click.echo(f"{run_id}: cases={len(report.cases)} "
               f"avg_steps={report.average_steps:.2f} outside_band={report.outside_band_count}")
    _print(report.average)


def _latest_priors(store: RunStore) -> dict[str, float]:
    """Most recent per-case composite scores from stored level-2/3 reports."""
    from .cases import composite_prior

    prior: dict[str, float] = {}
    for env in store.query_runs(namespace="evaluation"):
        if env.kind not in ("level2", "level3") or "report" not in env.artifacts:
            continue
        report = BatchReport.from_json(store.read_artifact_json(env, "report"))
        for case_id, agg in report.cases.items():
            prior[case_id] = composite_prior(agg.metrics)
    return prior


@main.command()
@click.option("--run-a", "run_a", required=True, help="Envelope id of the old batch report.")
@click.option("--run-b", "run_b", required=True, help="Envelope id of the new batch report.")
@click.option("--store", "store_dir", default="store", show_default=True)
@click.option("--out", "out_dir", default=".", show_default=True)
@click.option("--histogram-metric", default="treatment_accuracy", show_default=True)
@click.option("--seed", default=0, show_default=True)
def compare(run_a, run_b, store_dir, out_dir, histogram_metric, seed):
    """Paired comparison of two batch reports; writes compare.json and histogram.csv."""
    store = RunStore(store_dir)
    old = BatchReport.from_json(store.read_artifact_json(store.get(run_a), "report"))
    new = BatchReport.from_json(store.read_artifact_json(store.get(run_b), "report"))
    comparison = paired_compare(old, new, seed=seed)
    out = Path(out_dir)
    comparison.save(out / "compare.json")
    write_histogram_csv(out / "histogram.csv", comparison.metrics[histogram_metric].histogram)
    for name, mc in comparison.metrics.items():
        test = (f"wilcoxon p={mc.wilcoxon.p_two_sided:.4g}" if mc.wilcoxon
                else f"mcnemar p={mc.mcnemar.p_exact:.4g}")
        click.echo(f"{name}: effect={mc.effect.mean:+.2f} "
                   f"[{mc.effect.ci_low:.2f}, {mc.effect.ci_high:.2f}] {test}")


@main.command()
@click.option("--config", "config_path", required=True)
@click.option("--bank", "bank_dir", default=None)
@click.option("--store", "store_dir", default="store", show_default=True)
@click.option("--replay", "replay_path", default=None,
              help="Replay a recorded probe stream (JSONL) instead of executing probes.")
@click.option("--doctor", "doctor_spec", default=None)
@click.option("--now", "now_ts", type=float, default=None, help="Clock override for one-shot execution.")
def monitor(config_path, bank_dir, store_dir, replay_path, doctor_spec, now_ts):
    """Run the monitoring loop: replay a probe stream or execute one probe cycle."""
    import time as _time

    policy = MonitorPolicy.from_file(config_path)
    bank = _bank(bank_dir)
    store = RunStore(store_dir)
    loop = MonitorLoop(policy)
    if replay_path:
        for line in Path(replay_path).read_text().splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            probe = ProbeResult(
                case_id=obj["case_id"], category=obj["category"],
                model_version=obj["model_version"], timestamp=obj["timestamp"],
                dots=DotsRecord.from_json(obj["dots"]), passed=obj["passed"],
                safety=obj.get("safety", False),
            )
            verdict = loop.ingest(probe)
            persist_probe(store, probe)
            if verdict.verdict != "NO_ANOMALY":
                click.echo(f"t={probe.timestamp}: {verdict.verdict} {verdict.evidence}")
    else:
        if not doctor_spec:
            raise click.UsageError("--doctor is required unless --replay is given")
        now = now_ts if now_ts is not None else _time.time()
        traps = [c for c in bank.clinical_cases()
                 if set(c.scopes) & set(policy.safety_scopes)]
        factory = _doctor_factory(doctor_spec)
        for sched in schedule_probes(policy, [c.id for c in traps], now):
            if sched.next_run_at > now:
                continue
            case = bank.get(sched.case_id)
            outcome = execute_case(case, factory(case, 0))
            probe = probe_from_outcome(outcome, sched.model_version, now,
                                       safety_scopes=policy.safety_scopes)
            verdict = loop.ingest(probe)
            persist_probe(store, probe)
            click.echo(f"{sched.case_id}@{sched.model_version}: "
                       f"pass={probe.passed} verdict={verdict.verdict}")
    for incident in loop.incidents:
        persist_incident(store, asdict(incident), incident.model_version)
    summary = mttd_report(loop.incidents)
    click.echo(f"incidents={summary.incident_count} "
               f"mttd={summary.mean_s if summary.mean_s is not None else 'n/a'} "
               f"blocked={loop.blocked_versions()}")


@main.command()
@click.option("--bank", "bank_dir", default=None)
def errortests(bank_dir):
    """Run the error-test meta-evaluation on its own."""
    bank = _bank(bank_dir)
    report = run_error_tests(bank)
    _print({
        "overall_pass": report.overall_pass,
        "results": [asdict(r) for r in report.results],
    })
    sys.exit(0 if report.overall_pass else 1)


@main.command()
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--bank", "bank_dir", default=None)
@click.option("--store", "store_dir", default="store", show_default=True)
def serve(port, host, bank_dir, store_dir):
    """Host the HTTP API (sessions, runs, monitoring views, gate)."""
    import uvicorn

    from .service import ServiceConfig, create_app

    app = create_app(RunStore(store_dir), _bank(bank_dir), ServiceConfig())
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
@click.option("--week", "week_start", required=True, help="ISO date of the week start.")
@click.option("--store", "store_dir", default="store", show_default=True)
@click.option("--bank", "bank_dir", default=None)
@click.option("--out", "out_dir", default=".", show_default=True)
def report(week_start, store_dir, bank_dir, out_dir):
    """Weekly monitoring summary from stored probes and incidents."""
    import datetime as dt

    bank = _bank(bank_dir)
    store = RunStore(store_dir)
    start = dt.datetime.fromisoformat(week_start).replace(tzinfo=dt.timezone.utc).timestamp()
    end = start + 7 * 86400
    loop = MonitorLoop(MonitorPolicy())
    for env in store.query_runs(namespace="monitoring", kind="probe", since=start, until=end):
        if env.meta.get("incident"):
            obj = store.read_artifact_json(env, "incident")
            from .monitor import Incident

            loop.incidents.append(Incident(**obj))
            continue
        obj = store.read_artifact_json(env, "probe")
        loop.history.append(ProbeResult(
            case_id=obj["case_id"], category=obj["category"],
            model_version=obj["model_version"], timestamp=obj["timestamp"],
            dots=DotsRecord.from_json(obj["dots"]), passed=obj["passed"],
            safety=obj.get("safety", False),
        ))
    payload = weekly_report(loop, week_start, bank=bank, out_dir=out_dir)
    _print(payload)


@main.command("sample")
@click.option("--bank", "bank_dir", default=None)
@click.option("--per-category", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
def sample_cmd(bank_dir, per_category, seed):
    """Preview a Level-2 case selection."""
    bank = _bank(bank_dir)
    selection = sample_level2(bank, per_category, seed=seed)
    _print({"cases": selection.case_ids, "forced": selection.forced, "notes": selection.notes})


if __name__ == "__main__":
    main()
