"""Uniform access to chat-completion endpoints.

Three providers: a fully scripted one for offline, deterministic tests
(replays an ordered list of (role, text) pairs, optionally keyed by task
label so concurrent structured calls stay deterministic); an HTTP adapter
speaking a plain chat-completion wire format; and whatever else registers
through the same Provider interface.

Credentials are resolved from the environment by name and never written
to run logs or artifacts.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx
import jsonschema

from .errors import ProviderRefusal, SchemaViolation, Timeout, TransportError

ROLES = ("system", "doctor", "patient", "judge")

ENV_PROVIDER_URL = "DOTS_PROVIDER_URL"
ENV_API_KEY = "DOTS_PROVIDER_API_KEY"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    attachments: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.text and not self.attachments:
            raise ValueError("message needs text or attachments")


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = ""
    credential_name: str = ENV_API_KEY
    model: str = "default"
    timeout_s: float = 30.0
    max_retries: int = 3
    temperature: float = 0.0
    concurrency: int = 8  # simultaneous in-flight calls per provider

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("retries must be >= 0")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def credential(self) -> str | None:
        return os.environ.get(self.credential_name)


@dataclass
class CallRecord:
    """One outbound call: request summary, reply, latency. No credentials."""

    role: str
    request_preview: str
    reply_text: str
    latency_s: float
    model: str
    task: str | None = None


class RunLog:
    """Ordered, thread-safe record of every provider call in a session."""

    def __init__(self):
        self._records: list[CallRecord] = []
        self._lock = threading.Lock()

    def append(self, record: CallRecord) -> None:
        with self._lock:
            self._records.append(record)

    @property
    def records(self) -> list[CallRecord]:
        with self._lock:
            return list(self._records)

    def to_json(self) -> list[dict]:
        return [
            {
                "role": r.role,
                "request_preview": r.request_preview,
                "reply_text": r.reply_text,
                "latency_s": r.latency_s,
                "model": r.model,
                "task": r.task,
            }
            for r in self.records
        ]


class Provider:
    """Interface: produce one reply message for a history."""

    config: ProviderConfig
    _sem_init_lock = threading.Lock()

    def reply(self, history: list[ChatMessage], role: str, task: str | None = None) -> str:
        raise NotImplementedError

    def semaphore(self) -> threading.BoundedSemaphore:
        """Rate-limit guard: at most config.concurrency calls in flight."""
        sem = getattr(self, "_semaphore", None)
        if sem is None:
            with Provider._sem_init_lock:
                sem = getattr(self, "_semaphore", None)
                if sem is None:
                    sem = threading.BoundedSemaphore(self.config.concurrency)
                    self._semaphore = sem
        return sem


class ScriptedProvider(Provider):
    """Deterministic replay provider.

    The script is an ordered list of entries ``{"role": ..., "text": ...}``,
    optionally with ``"task"``. A call consumes the first pending entry
    whose role matches (and task, when both sides have one). Running out
    of matching entries is a hard error: the script and the call sequence
    must agree exactly.
    """

    def __init__(self, entries: list[dict], config: ProviderConfig | None = None):
        self.config = config or ProviderConfig(endpoint="scripted:")
        self._entries = [dict(e) for e in entries]
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, config: ProviderConfig | None = None) -> "ScriptedProvider":
        return cls(json.loads(Path(path).read_text()), config)

    def reply(self, history: list[ChatMessage], role: str, task: str | None = None) -> str:
        with self._lock:
            for i, entry in enumerate(self._entries):
                if entry.get("role") != role:
                    continue
                etask = entry.get("task")
                if etask is not None and task is not None and etask != task:
                    continue
                self._entries.pop(i)
                return entry["text"]
        raise ProviderRefusal(f"script exhausted for role={role!r} task={task!r}")

    def pending(self) -> int:
        with self._lock:
            return len(self._entries)


class HTTPProvider(Provider):
    """Plain chat-completion over HTTP.

    POSTs ``{"model", "temperature", "messages": [{"role", "content"}]}``
    to the endpoint and expects ``{"message": {"content": ...}}`` (or an
    OpenAI-style ``choices[0].message.content``) back.
    """

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout_s)

    def reply(self, history: list[ChatMessage], role: str, task: str | None = None) -> str:
        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "target_role": role,
            "messages": [
                {"role": m.role, "content": m.text, "attachments": list(m.attachments)}
                for m in history
            ],
        }
        headers = {}
        cred = self.config.credential()
        if cred:
            headers["Authorization"] = f"Bearer {cred}"
        attempts = 0
        last_exc: Exception | None = None
        while attempts <= self.config.max_retries:
            attempts += 1
            try:
                resp = self._client.post(self.config.endpoint, json=payload, headers=headers)
            except httpx.TimeoutException as exc:
                last_exc = exc
                continue
            except httpx.HTTPError as exc:
                raise TransportError(str(exc)) from exc
            if resp.status_code in (400, 403, 422):
                raise ProviderRefusal(f"provider refused: {resp.status_code}")
            if resp.status_code >= 500:
                last_exc = TransportError(f"server error {resp.status_code}")
                continue
            body = resp.json()
            if "message" in body:
                return body["message"]["content"]
            return body["choices"][0]["message"]["content"]
        raise Timeout(f"no reply after {attempts} attempts", attempts=attempts)


def provider_from_spec(spec: str, config: ProviderConfig | None = None) -> Provider:
    """Build a provider from a CLI-style locator.

    ``scripted:<path>`` replays a script file; ``http:<url>`` /
    ``https:<url>`` talk to an endpoint; ``env:`` reads the endpoint from
    DOTS_PROVIDER_URL.
    """
    if spec.startswith("scripted:"):
        return ScriptedProvider.from_file(spec.split(":", 1)[1], config)
    if spec.startswith(("http:", "https:")):
        cfg = config or ProviderConfig(endpoint=spec)
        if cfg.endpoint != spec:
            cfg = ProviderConfig(
                endpoint=spec, credential_name=cfg.credential_name, model=cfg.model,
                timeout_s=cfg.timeout_s, max_retries=cfg.max_retries,
                temperature=cfg.temperature,
            )
        return HTTPProvider(cfg)
    if spec == "env:":
        url = os.environ.get(ENV_PROVIDER_URL)
        if not url:
            raise ValueError(f"{ENV_PROVIDER_URL} is not set")
        return HTTPProvider(config or ProviderConfig(endpoint=url))
    raise ValueError(f"unknown provider spec {spec!r}")


def complete_chat(
    provider: Provider,
    history: list[ChatMessage],
    role: str,
    log: RunLog | None = None,
    task: str | None = None,
) -> ChatMessage:
    """One reply message for a nonempty history, recorded in the run log."""
    if not history:
        raise ValueError("history must be nonempty")
    start = time.monotonic()
    with provider.semaphore():
        text = provider.reply(history, role, task)
    latency = time.monotonic() - start
    if log is not None:
        log.append(CallRecord(
            role=role,
            request_preview=history[-1].text[:200],
            reply_text=text,
            latency_s=latency,
            model=provider.config.model,
            task=task,
        ))
    return ChatMessage(role=role, text=text)


# ---------------------------------------------------------------------------
# Structured completion

class ExtractionSchema:
    """Declarative output contract for judge calls: required fields,
    types and enumerations, validated as a JSON Schema document."""

    def __init__(self, name: str, schema: dict):
        required = schema.get("required", [])
        if not required:
            raise ValueError("schema needs at least one required field")
        self.name = name
        self.schema = schema
        self._validator = jsonschema.Draft202012Validator(schema)

    def validate(self, payload: Any) -> list[str]:
        return [e.message for e in self._validator.iter_errors(payload)]

    def describe(self) -> str:
        return json.dumps(self.schema, indent=2)


_JSON_BLOCK_RE = re.compile(r"\{.*\}", re.DOTALL)


def parse_json_reply(text: str) -> Any:
    """Parse a JSON object out of a reply, tolerating fenced or prefixed text."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        m = _JSON_BLOCK_RE.search(text)
        if not m:
            raise
        return json.loads(m.group(0))


def complete_structured(
    provider: Provider,
    history: list[ChatMessage],
    schema: ExtractionSchema,
    log: RunLog | None = None,
    task: str | None = None,
) -> dict:
    """Chat completion that must parse against ``schema``.

    On a malformed reply the validation error is fed back as a follow-up
    prompt, up to the provider's retry budget; exhausting it raises
    SchemaViolation (an evaluator malfunction, surfaced to monitoring).
    """
    attempts = 0
    errors: list[str] = []
    convo = list(history)
    max_attempts = provider.config.max_retries + 1
    while attempts < max_attempts:
        attempts += 1
        msg = complete_chat(provider, convo, role="judge", log=log, task=task)
        try:
            payload = parse_json_reply(msg.text)
        except json.JSONDecodeError as exc:
            errors = [f"invalid JSON: {exc}"]
        else:
            errors = schema.validate(payload)
            if not errors:
                return payload
        convo = convo + [
            msg,
            ChatMessage(
                role="system",
                text=(
                    f"The reply did not match the required {schema.name} format: "
                    f"{'; '.join(errors)}. Reply again with only a valid JSON object."
                ),
            ),
        ]
    raise SchemaViolation(
        f"{schema.name}: invalid after {attempts} attempts", attempts=attempts, errors=errors,
    )
