"""HTTP service: human consultation sessions, run queries, monitoring views.

The service is the single process hosting live sessions. It owns no
scoring logic of its own: finalized sessions go through the same
evaluator and scorer as offline runs, and every number a client sees is
read back from the run store.

Namespace isolation: when bearer tokens are configured, each token maps
to the namespace it may read ("evaluation", "monitoring" or "*"); the
query layer silently filters everything else out.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field

from fastapi import Depends, FastAPI, Header, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from . import __version__
from .cases import CaseBank
from .dialogue import (
    FinalBlock,
    SimulationLimits,
    count_steps,
    finalize_session,
    open_human_session,
    post_doctor_message,
)
from .errors import SessionExpired, StepLimitReached
from .evaluator import evaluate_transcript
from .monitor import HOUR, DAY, ProbeResult
from .runstore import RunStore
from .scoring import ALL_METRICS, DotsRecord, assemble_dots


@dataclass
class ServiceConfig:
    max_steps: int = 20
    session_budget_s: float = 3600.0
    model_version: str = "human-session"
    # token -> readable namespace ("*" = all). Empty dict = open access.
    tokens: dict[str, str] = field(default_factory=dict)


class OpenSessionRequest(BaseModel):
    case_id: str


class MessageRequest(BaseModel):
    text: str = Field(min_length=1)


class FinalizeRequest(BaseModel):
    diagnoses: list[str] = Field(min_length=1)
    icd10: list[str] = Field(default_factory=list)
    differential: list[str] = Field(default_factory=list)
    investigations: list[str] = Field(default_factory=list)
    treatments: list[str] = Field(default_factory=list)
    explanation: str = ""


def create_app(store: RunStore, bank: CaseBank, config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="dots-service", version=__version__)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )
    sessions: dict[str, object] = {}
    lock = threading.Lock()

    def namespace_scope(authorization: str | None = Header(default=None)) -> str:
        if not config.tokens:
            return "*"
        if authorization is None or not authorization.startswith("Bearer "):
            raise HTTPException(status_code=401, detail="bearer token required")
        token = authorization.removeprefix("Bearer ")
        scope = config.tokens.get(token)
        if scope is None:
            raise HTTPException(status_code=401, detail="unknown token")
        return scope

    def _resolve_dots(run_id: str) -> dict:
        try:
            env = store.get(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="run not found")
        if "dots" not in env.artifacts:
            # superseding evaluation envelopes carry the scores
            superseding = [
                e for e in store.query_runs()
                if e.meta.get("supersedes") == run_id and "dots" in e.artifacts
            ]
            if not superseding:
                raise HTTPException(status_code=404, detail="run has no scores")
            env = superseding[-1]
        return store.read_artifact_json(env, "dots")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    @app.post("/sessions")
    def open_session(req: OpenSessionRequest):
        if req.case_id not in bank.cases:
            raise HTTPException(status_code=404, detail="unknown case")
        case = bank.get(req.case_id)
        limits = SimulationLimits(
            max_steps=config.max_steps, wall_clock_budget_s=config.session_budget_s,
        )
        handle = open_human_session(case, limits, session_id=f"hs-{uuid.uuid4().hex[:12]}")
        with lock:
            sessions[handle.session_id] = handle
        intro_turn = handle.transcript.turns[0]
        return {
            "session_id": handle.session_id,
            "case_id": case.id,
            "intro": case.intro,
            "attachments": intro_turn.attachments,
            "steps_expected": case.num_steps,
            "max_steps": limits.max_steps,
            "steps_used": 0,
        }

    def _session(session_id: str):
        with lock:
            handle = sessions.get(session_id)
        if handle is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return handle

    @app.post("/sessions/{session_id}/message")
    def post_message(session_id: str, req: MessageRequest):
        handle = _session(session_id)
        try:
            reply = post_doctor_message(handle, req.text)
        except StepLimitReached as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except SessionExpired as exc:
            raise HTTPException(status_code=410, detail=str(exc))
        return {
            "reply": reply,
            "attachments": handle.transcript.turns[-1].attachments,
            "steps_used": handle.steps_used,
            "steps_remaining": handle.limits.max_steps - handle.steps_used,
        }

    @app.post("/sessions/{session_id}/finalize")
    def finalize(session_id: str, req: FinalizeRequest):
        handle = _session(session_id)
        block = FinalBlock(
            diagnoses=req.diagnoses,
            icd10=req.icd10,
            differential=req.differential,
            investigations=req.investigations,
            treatments=req.treatments,
            explanation=req.explanation,
        )
        try:
            transcript = finalize_session(handle, block)
        except SessionExpired as exc:
            raise HTTPException(status_code=410, detail=str(exc))
        case = handle.case
        extraction = evaluate_transcript(transcript, case)
        dots = assemble_dots(extraction, case, count_steps(transcript))
        store.persist_run(
            run_id=transcript.run_id,
            kind="human-session",
            namespace="evaluation",
            artifacts={
                "transcript": "\n".join(transcript.to_json_lines()) + "\n",
                "extraction": _json_bytes(extraction.to_json()),
                "dots": _json_bytes(dots.to_json()),
            },
            model_version=config.model_version,
            case_id=case.id,
        )
        with lock:
            sessions.pop(session_id, None)
        return {"run_id": transcript.run_id, "dots": dots.to_json()}

    @app.get("/runs/{run_id}/dots")
    def run_dots(run_id: str, scope: str = Depends(namespace_scope)):
        env = None
        try:
            env = store.get(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="run not found")
        if scope != "*" and env.namespace != scope:
            raise HTTPException(status_code=404, detail="run not found")
        return _resolve_dots(run_id)

    @app.get("/runs")
    def runs(
        namespace: str | None = None,
        kind: str | None = None,
        model_version: str | None = None,
        case_id: str | None = None,
        since: float | None = None,
        until: float | None = None,
        scope: str = Depends(namespace_scope),
    ):
        if scope != "*":
            if namespace is not None and namespace != scope:
                return {"runs": []}
            namespace = scope
        envs = store.query_runs(
            namespace=namespace, kind=kind, model_version=model_version,
            case_id=case_id, since=since, until=until,
        )
        return {
            "runs": [
                {
                    "run_id": e.run_id,
                    "kind": e.kind,
                    "namespace": e.namespace,
                    "model_version": e.model_version,
                    "case_id": e.case_id,
                    "created_at": e.created_at,
                    "artifacts": e.artifacts,
                    "meta": e.meta,
                }
                for e in envs
            ]
        }

    def _monitoring_probes(model_version: str | None, now: float) -> list[ProbeResult]:
        envs = store.query_runs(namespace="monitoring", kind="probe",
                                model_version=model_version, until=now)
        probes = []
        for e in envs:
            if e.meta.get("incident"):
                continue
            obj = store.read_artifact_json(e, "probe")
            probes.append(ProbeResult(
                case_id=obj["case_id"], category=obj["category"],
                model_version=obj["model_version"], timestamp=obj["timestamp"],
                dots=DotsRecord.from_json(obj["dots"]), passed=obj["passed"],
                safety=obj.get("safety", False),
            ))
        return probes

    @app.get("/metrics/windows")
    def metrics_windows(model: str | None = None, now: float | None = None,
                        scope: str = Depends(namespace_scope)):
        if scope not in ("*", "monitoring"):
            raise HTTPException(status_code=403, detail="monitoring scope required")
        ts = now if now is not None else time.time()
        probes = _monitoring_probes(model, ts)
        windows = {}
        for label, span in (("1h", HOUR), ("24h", DAY)):
            in_window = [p for p in probes if ts - span <= p.timestamp <= ts]
            per_cat: dict[str, dict[str, float]] = {}
            for p in in_window:
                bucket = per_cat.setdefault(p.category, {m: 0.0 for m in ALL_METRICS})
                bucket["_count"] = bucket.get("_count", 0) + 1
                for m in ALL_METRICS:
                    bucket[m] += getattr(p.dots, m)
            for cat, bucket in per_cat.items():
                n = bucket.pop("_count")
                for m in ALL_METRICS:
                    bucket[m] /= n
            windows[label] = per_cat
        total = len(probes)
        passed = sum(1 for p in probes if p.passed)
        incidents = []
        for e in store.query_runs(namespace="monitoring", kind="probe"):
            if e.meta.get("incident"):
                incidents.append(store.read_artifact_json(e, "incident"))
        return {
            "model": model,
            "now": ts,
            "windows": windows,
            "trap_pass_rate": (100.0 * passed / total) if total else None,
            "probe_count": total,
            "incidents": incidents,
        }

    @app.get("/gate/{model_version}")
    def gate(model_version: str, scope: str = Depends(namespace_scope)):
        if scope not in ("*", "monitoring"):
            raise HTTPException(status_code=403, detail="monitoring scope required")
        decision = "allow"
        latest: dict | None = None
        for e in store.query_runs(namespace="monitoring", kind="probe", model_version=model_version):
            if e.meta.get("incident"):
                latest = store.read_artifact_json(e, "incident")
        if latest is not None and latest.get("outcome") == "blocked":
            decision = "deny"
        return {"model_version": model_version, "decision": decision}

    return app


def _json_bytes(obj) -> str:
    import json

    return json.dumps(obj, indent=2) + "\n"


def persist_probe(store: RunStore, probe: ProbeResult, run_id: str | None = None) -> str:
    """Commit a probe result into the monitoring namespace."""
    import json

    rid = run_id or f"probe-{probe.case_id}-{int(probe.timestamp)}-{uuid.uuid4().hex[:6]}"
    return store.persist_run(
        run_id=rid,
        kind="probe",
        namespace="monitoring",
        artifacts={"probe": json.dumps({
            "case_id": probe.case_id,
            "category": probe.category,
            "model_version": probe.model_version,
            "timestamp": probe.timestamp,
            "passed": probe.passed,
            "safety": probe.safety,
            "dots": probe.dots.to_json(),
        }, indent=2) + "\n"},
        model_version=probe.model_version,
        case_id=probe.case_id,
        created_at=probe.timestamp,
    )


def persist_incident(store: RunStore, incident: dict, model_version: str) -> str:
    import json

    rid = f"incident-{incident.get('incident_id', uuid.uuid4().hex[:6])}-{uuid.uuid4().hex[:6]}"
    return store.persist_run(
        run_id=rid,
        kind="probe",
        namespace="monitoring",
        artifacts={"incident": json.dumps(incident, indent=2) + "\n"},
        model_version=model_version,
        created_at=incident.get("detected_at"),
        meta={"incident": True},
    )
