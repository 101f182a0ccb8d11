"""Step-limited doctor-patient simulation.

The cycle: patient intro (plus at-intro attachments), then alternating
doctor question / patient answer until the doctor emits a final
recommendation block or the step budget runs out. Every turn is logged;
the finished transcript is persisted as line-delimited JSON before the
call returns.

The simulated patient is fact-constrained: it answers only what was
asked, from the case's fact bank, and falls back to an uncertainty
template instead of inventing details. Behavioral archetypes (over-sharer,
insistent, denier, questioner, returner) shape the phrasing without ever
adding facts that are not in the case record.
"""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .cases import Attachment, CaseRecord, normalize_text
from .errors import DoctorUnreachable, PatientAgentFailure, SessionExpired, StepLimitReached
from .gateway import ChatMessage, Provider, RunLog, complete_chat, parse_json_reply

DEFAULT_MAX_STEPS = 20
FINAL_MARKER_PHRASE = "FINAL RECOMMENDATIONS"

UNCERTAIN_REPLY = "I'm not sure about that, doctor."
DEFAULT_CLARIFYING_QUESTION = "Sorry, what do you mean by that?"

ARCHETYPE_TEMPLATES = (UNCERTAIN_REPLY, DEFAULT_CLARIFYING_QUESTION)


@dataclass
class Turn:
    role: str
    text: str
    step: int
    attachments: list[dict] = field(default_factory=list)
    timestamp: float = 0.0


@dataclass
class Transcript:
    case_id: str
    run_id: str
    turns: list[Turn] = field(default_factory=list)
    is_conversation_complete: bool = False
    termination_reason: str = "error"  # doctor-finalized | step-limit | error
    provider_meta: dict = field(default_factory=dict)

    def doctor_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.role == "doctor"]

    def patient_turns_excluding_intro(self) -> list[Turn]:
        turns = [t for t in self.turns if t.role == "patient"]
        return turns[1:] if turns else []

    def full_text(self) -> str:
        return "\n".join(t.text for t in self.turns)

    def to_json_lines(self) -> list[str]:
        lines = [json.dumps(asdict(t), ensure_ascii=False) for t in self.turns]
        lines.append(json.dumps({
            "summary": True,
            "case_id": self.case_id,
            "run_id": self.run_id,
            "is_conversation_complete": self.is_conversation_complete,
            "termination_reason": self.termination_reason,
            "provider_meta": self.provider_meta,
        }, ensure_ascii=False))
        return lines

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / f"{self.run_id}.transcript.jsonl"
        path.write_text("\n".join(self.to_json_lines()) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Transcript":
        lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        summary = lines[-1]
        if not summary.get("summary"):
            raise ValueError(f"{path}: missing terminal summary line")
        return cls(
            case_id=summary["case_id"],
            run_id=summary["run_id"],
            turns=[Turn(**t) for t in lines[:-1]],
            is_conversation_complete=summary["is_conversation_complete"],
            termination_reason=summary["termination_reason"],
            provider_meta=summary.get("provider_meta", {}),
        )


@dataclass(frozen=True)
class SimulationLimits:
    max_steps: int = DEFAULT_MAX_STEPS
    per_turn_timeout_s: float = 60.0
    wall_clock_budget_s: float = 3600.0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def count_steps(transcript: Transcript) -> int:
    """Complete question-answer exchanges: the smaller of the doctor turn
    count and the patient turn count without the intro."""
    return min(
        len(transcript.doctor_turns()),
        len(transcript.patient_turns_excluding_intro()),
    )


# ---------------------------------------------------------------------------
# Completion detection and the final recommendation block

def detect_completion(doctor_message: str, marker_phrase: str = FINAL_MARKER_PHRASE) -> bool:
    """True when the message carries the structured finalization sentinel,
    or (fallback for unstructured endpoints) the configured marker phrase."""
    try:
        payload = parse_json_reply(doctor_message)
    except (json.JSONDecodeError, ValueError):
        payload = None
    if isinstance(payload, dict) and payload.get("final_recommendations") is True:
        return True
    return marker_phrase in doctor_message


@dataclass
class FinalBlock:
    diagnoses: list[str] = field(default_factory=list)
    icd10: list[str] = field(default_factory=list)
    differential: list[str] = field(default_factory=list)
    investigations: list[str] = field(default_factory=list)
    treatments: list[str] = field(default_factory=list)
    explanation: str = ""

    def to_message_text(self) -> str:
        obj = {"final_recommendations": True, **asdict(self)}
        return json.dumps(obj, ensure_ascii=False, indent=1)


def parse_final_block(doctor_message: str) -> FinalBlock | None:
    try:
        payload = parse_json_reply(doctor_message)
    except (json.JSONDecodeError, ValueError):
        return None
    if not isinstance(payload, dict) or payload.get("final_recommendations") is not True:
        return None
    return FinalBlock(
        diagnoses=list(payload.get("diagnoses", [])),
        icd10=list(payload.get("icd10", [])),
        differential=list(payload.get("differential", [])),
        investigations=list(payload.get("investigations", [])),
        treatments=list(payload.get("treatments", [])),
        explanation=payload.get("explanation", ""),
    )


def final_block_of(transcript: Transcript) -> FinalBlock | None:
    """The last final recommendation block in the transcript, if any.
    (The last one wins: a returner follow-up amends the first block.)"""
    for turn in reversed(transcript.turns):
        if turn.role != "doctor":
            continue
        block = parse_final_block(turn.text)
        if block is not None:
            return block
    return None


# ---------------------------------------------------------------------------
# Patient agent

def _match_attachments(case: CaseRecord, question: str, revealed: set[str]) -> list[Attachment]:
    """On-request attachments whose request keywords appear in the question."""
    q = normalize_text(question)
    out = []
    for att in case.attachments:
        if att.reveal != "on-request" or att.content_ref in revealed:
            continue
        keywords = att.request_keywords or (att.kind,)
        if any(normalize_text(k) in q for k in keywords):
            out.append(att)
    return out


def _lookup_fact(case: CaseRecord, question: str, revealed: set[str]) -> str | None:
    """First fact-bank topic whose keywords appear in the question."""
    q = normalize_text(question)
    for fact in case.fact_bank:
        if any(normalize_text(k) in q for k in fact.match_keywords()):
            revealed.add(fact.topic)
            return fact.answer
    return None


def patient_reply(
    case: CaseRecord,
    history: list[ChatMessage],
    question: str,
    provider: Provider | None = None,
    revealed: set[str] | None = None,
    log: RunLog | None = None,
) -> str:
    """Answer a doctor question from the case record.

    Without a provider this is a pure fact-bank lookup (used by offline
    tests and probes): the matching topic's verbatim answer, an uncertainty
    template when nothing matches, plus archetype phrasing. With a
    provider, the same grounding is enforced by the system prompt and the
    reply is model-paraphrased.
    """
    if not question.strip():
        raise ValueError("question must be nonempty")
    revealed = revealed if revealed is not None else set()
    params = case.archetype_params

    if provider is not None:
        system = ChatMessage(role="system", text=_patient_system_prompt(case))
        try:
            msg = complete_chat(provider, [system, *history, ChatMessage(role="doctor", text=question)],
                                role="patient", log=log)
        except Exception as exc:  # provider failures all surface the same way
            raise PatientAgentFailure(str(exc)) from exc
        return msg.text

    archetype = case.patient_archetype
    if archetype == "denier":
        denial = params.get("denial", {})
        if any(normalize_text(k) in normalize_text(question) for k in denial.get("keywords", [])):
            return denial.get("reply", UNCERTAIN_REPLY)
    if archetype == "questioner":
        clarify_on = params.get("clarify_on", [])
        if any(normalize_text(k) in normalize_text(question) for k in clarify_on):
            return params.get("clarify_reply", DEFAULT_CLARIFYING_QUESTION)

    answer = _lookup_fact(case, question, revealed)
    reply = answer if answer is not None else UNCERTAIN_REPLY

    if archetype == "insistent" and params.get("insist"):
        reply = f"{params['insist']} {reply}"
    if archetype == "over-sharer":
        extra = next((f for f in case.fact_bank if f.topic not in revealed), None)
        if extra is not None:
            revealed.add(extra.topic)
            reply = f"{reply} {extra.answer}"
    return reply


def _patient_system_prompt(case: CaseRecord) -> str:
    facts = "\n".join(f"- {f.topic}: {f.answer}" for f in case.fact_bank)
    return (
        "You are a patient in a medical consultation. Stay strictly inside the "
        "facts below. Answer only the question asked, briefly. Never add "
        "symptoms, history, or results that are not listed. If asked about "
        f"something not listed, say you are not sure or answer no.\n"
        f"Opening situation: {case.intro}\n"
        f"Known facts:\n{facts}\n"
        f"Behavioral style: {case.patient_archetype}."
    )


# ---------------------------------------------------------------------------
# Doctor endpoint

class DoctorEndpoint:
    """Doctor side of the simulation: any Provider plus a display name."""

    def __init__(self, provider: Provider, name: str = "doctor"):
        self.provider = provider
        self.name = name

    def next_message(self, history: list[ChatMessage], log: RunLog | None = None) -> ChatMessage:
        try:
            return complete_chat(self.provider, history, role="doctor", log=log)
        except Exception as exc:
            raise DoctorUnreachable(str(exc)) from exc


# ---------------------------------------------------------------------------
# Simulation loop

def _as_chat_history(turns: list[Turn]) -> list[ChatMessage]:
    return [
        ChatMessage(role=t.role, text=t.text, attachments=tuple(a["content_ref"] for a in t.attachments))
        for t in turns
    ]


def _attachment_dicts(atts: list[Attachment]) -> list[dict]:
    return [{"kind": a.kind, "content_ref": a.content_ref} for a in atts]


def run_simulation(
    case: CaseRecord,
    doctor: DoctorEndpoint,
    limits: SimulationLimits | None = None,
    seed: int = 0,
    run_id: str | None = None,
    patient_provider: Provider | None = None,
    out_dir: str | Path | None = None,
    log: RunLog | None = None,
    clock: Callable[[], float] = time.time,
) -> Transcript:
    """Drive one full consultation and return the persisted transcript.

    Doctor or patient failures do not raise: the transcript comes back
    with termination_reason="error" and counts against completion.
    """
    limits = limits or SimulationLimits()
    run_id = run_id or f"{case.id}-s{seed}-{uuid.uuid4().hex[:8]}"
    transcript = Transcript(
        case_id=case.id,
        run_id=run_id,
        provider_meta={"doctor": doctor.name, "model": doctor.provider.config.model, "seed": seed},
    )
    intro_atts = [a for a in case.attachments if a.reveal == "at-intro"]
    transcript.turns.append(Turn(
        role="patient", text=case.intro, step=0,
        attachments=_attachment_dicts(intro_atts), timestamp=clock(),
    ))
    revealed: set[str] = set()
    step = 0
    finalized = False
    try:
        while step < limits.max_steps:
            doc_msg = doctor.next_message(_as_chat_history(transcript.turns), log=log)
            step_idx = len(transcript.turns)
            transcript.turns.append(Turn(role="doctor", text=doc_msg.text, step=step_idx, timestamp=clock()))
            if detect_completion(doc_msg.text):
                finalized = True
                break
            step += 1
            reply = patient_reply(case, _as_chat_history(transcript.turns[:-1]), doc_msg.text,
                                  provider=patient_provider, revealed=revealed, log=log)
            atts = _match_attachments(case, doc_msg.text, {a["content_ref"] for t in transcript.turns for a in t.attachments})
            transcript.turns.append(Turn(
                role="patient", text=reply, step=len(transcript.turns),
                attachments=_attachment_dicts(atts), timestamp=clock(),
            ))
        if finalized and case.patient_archetype == "returner" and case.archetype_params.get("return_message"):
            # exactly one post-finalization exchange; the amended block wins
            transcript.turns.append(Turn(
                role="patient", text=case.archetype_params["return_message"],
                step=len(transcript.turns), timestamp=clock(),
            ))
            doc_msg = doctor.next_message(_as_chat_history(transcript.turns), log=log)
            transcript.turns.append(Turn(role="doctor", text=doc_msg.text,
                                         step=len(transcript.turns), timestamp=clock()))
        transcript.is_conversation_complete = finalized
        transcript.termination_reason = "doctor-finalized" if finalized else "step-limit"
    except (DoctorUnreachable, PatientAgentFailure) as exc:
        transcript.is_conversation_complete = False
        transcript.termination_reason = "error"
        transcript.provider_meta["error"] = f"{type(exc).__name__}: {exc}"
    if out_dir is not None:
        transcript.save(out_dir)
    return transcript


# ---------------------------------------------------------------------------
# Human sessions

@dataclass
class SessionHandle:
    session_id: str
    case: CaseRecord
    limits: SimulationLimits
    transcript: Transcript
    opened_at: float
    revealed: set[str] = field(default_factory=set)
    finalized: bool = False
    clock: Callable[[], float] = time.time

    @property
    def steps_used(self) -> int:
        return count_steps(self.transcript)


def open_human_session(
    case: CaseRecord,
    limits: SimulationLimits | None = None,
    session_id: str | None = None,
    clock: Callable[[], float] = time.time,
) -> SessionHandle:
    limits = limits or SimulationLimits()
    session_id = session_id or f"session-{uuid.uuid4().hex[:12]}"
    transcript = Transcript(
        case_id=case.id,
        run_id=session_id,
        provider_meta={"doctor": "human-session"},
    )
    intro_atts = [a for a in case.attachments if a.reveal == "at-intro"]
    transcript.turns.append(Turn(
        role="patient", text=case.intro, step=0,
        attachments=_attachment_dicts(intro_atts), timestamp=clock(),
    ))
    return SessionHandle(
        session_id=session_id, case=case, limits=limits,
        transcript=transcript, opened_at=clock(), clock=clock,
    )


def _check_session_open(handle: SessionHandle) -> None:
    if handle.finalized:
        raise SessionExpired("session already finalized")
    if handle.clock() - handle.opened_at > handle.limits.wall_clock_budget_s:
        raise SessionExpired("wall-clock budget exhausted")


def post_doctor_message(
    handle: SessionHandle,
    text: str,
    patient_provider: Provider | None = None,
) -> str:
    """Human doctor asks one question; returns the patient reply."""
    _check_session_open(handle)
    if handle.steps_used >= handle.limits.max_steps:
        raise StepLimitReached(f"step budget {handle.limits.max_steps} exhausted")
    if not text.strip():
        raise ValueError("message must be nonempty")
    t = handle.transcript
    t.turns.append(Turn(role="doctor", text=text, step=len(t.turns), timestamp=handle.clock()))
    reply = patient_reply(handle.case, _as_chat_history(t.turns[:-1]), text,
                          provider=patient_provider, revealed=handle.revealed)
    atts = _match_attachments(handle.case, text,
                              {a["content_ref"] for turn in t.turns for a in turn.attachments})
    t.turns.append(Turn(role="patient", text=reply, step=len(t.turns),
                        attachments=_attachment_dicts(atts), timestamp=handle.clock()))
    return reply


def finalize_session(
    handle: SessionHandle,
    recommendations: FinalBlock | str,
    out_dir: str | Path | None = None,
) -> Transcript:
    """Close the session with the final recommendation block."""
    _check_session_open(handle)
    if isinstance(recommendations, str):
        if not recommendations.strip():
            raise ValueError("recommendations must be nonempty")
        text = recommendations
        if parse_final_block(text) is None:
            raise ValueError("recommendations must carry the finalization sentinel")
    else:
        if not recommendations.diagnoses:
            raise ValueError("final block needs at least one diagnosis")
        text = recommendations.to_message_text()
    t = handle.transcript
    t.turns.append(Turn(role="doctor", text=text, step=len(t.turns), timestamp=handle.clock()))
    t.is_conversation_complete = True
    t.termination_reason = "doctor-finalized"
    handle.finalized = True
    if out_dir is not None:
        t.save(out_dir)
    return t
