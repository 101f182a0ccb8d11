"""Append-only run store.

Artifacts (transcripts, extractions, metric records, reports) are
content-addressed blobs under ``artifacts/<aa>/<hash>``; envelopes live in
an append-only ``index.jsonl``. Commit order is artifacts first, envelope
last, so a crash in between leaves only an orphan blob, which startup
garbage-collects. Envelopes are never rewritten; corrections create
superseding envelopes.

Two namespaces, ``evaluation`` and ``monitoring``, are isolated at the
query layer: a reader scoped to one namespace cannot see the other.
"""

from __future__ import annotations

import errno
import hashlib
import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DuplicateRunId, StorageFull

KINDS = ("simulation", "probe", "level1", "level2", "level3", "error-test", "human-session")
NAMESPACES = ("evaluation", "monitoring")


@dataclass(frozen=True)
class RunEnvelope:
    run_id: str
    kind: str
    namespace: str
    artifacts: dict[str, str]  # name -> content hash
    model_version: str = "unknown"
    case_id: str | None = None
    created_at: float = 0.0
    seq: int = 0  # insertion order; breaks created_at ties deterministically
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown run kind {self.kind!r}")
        if self.namespace not in NAMESPACES:
            raise ValueError(f"unknown namespace {self.namespace!r}")


class RunStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.artifacts_dir = self.root / "artifacts"
        self.index_path = self.root / "index.jsonl"
        self.artifacts_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._envelopes: dict[str, RunEnvelope] = {}
        self._load_index()
        self._gc_orphans()

    def _load_index(self) -> None:
        if not self.index_path.exists():
            return
        for line in self.index_path.read_text().splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            env = RunEnvelope(**obj)
            self._envelopes[env.run_id] = env

    def _gc_orphans(self) -> None:
        referenced = {
            h for env in self._envelopes.values() for h in env.artifacts.values()
        }
        for sub in self.artifacts_dir.iterdir():
            if not sub.is_dir():
                continue
            for blob in sub.iterdir():
                if blob.name not in referenced:
                    blob.unlink()

    # -- write path --------------------------------------------------------

    def put_artifact(self, content: bytes | str) -> str:
        data = content.encode("utf-8") if isinstance(content, str) else content
        digest = hashlib.sha256(data).hexdigest()
        path = self.artifacts_dir / digest[:2] / digest
        if not path.exists():
            path.parent.mkdir(exist_ok=True)
            try:
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(data)
                tmp.rename(path)
            except OSError as exc:
                if exc.errno == errno.ENOSPC:
                    raise StorageFull(str(exc)) from exc
                raise
        return digest

    def persist_run(
        self,
        run_id: str,
        kind: str,
        namespace: str,
        artifacts: dict[str, bytes | str],
        model_version: str = "unknown",
        case_id: str | None = None,
        meta: dict | None = None,
        created_at: float | None = None,
    ) -> str:
        """Atomic commit: blobs first, envelope appended last."""
        with self._lock:
            if run_id in self._envelopes:
                raise DuplicateRunId(run_id)
            hashes = {name: self.put_artifact(content) for name, content in artifacts.items()}
            env = RunEnvelope(
                run_id=run_id,
                kind=kind,
                namespace=namespace,
                artifacts=hashes,
                model_version=model_version,
                case_id=case_id,
                created_at=created_at if created_at is not None else time.time(),
                seq=len(self._envelopes),
                meta=meta or {},
            )
            try:
                with open(self.index_path, "a") as fh:
                    fh.write(json.dumps(asdict(env)) + "\n")
                    fh.flush()
            except OSError as exc:
                if exc.errno == errno.ENOSPC:
                    raise StorageFull(str(exc)) from exc
                raise
            self._envelopes[run_id] = env
        return run_id

    # -- read path ----------------------------------------------------------

    def get(self, run_id: str, namespace: str | None = None) -> RunEnvelope:
        env = self._envelopes[run_id]
        if namespace is not None and env.namespace != namespace:
            raise KeyError(run_id)  # scoped reader must not learn it exists
        return env

    def read_artifact(self, env: RunEnvelope, name: str) -> bytes:
        digest = env.artifacts[name]
        return (self.artifacts_dir / digest[:2] / digest).read_bytes()

    def read_artifact_json(self, env: RunEnvelope, name: str) -> dict:
        return json.loads(self.read_artifact(env, name))

    def query_runs(
        self,
        namespace: str | None = None,
        kind: str | None = None,
        model_version: str | None = None,
        case_id: str | None = None,
        since: float | None = None,
        until: float | None = None,
    ) -> list[RunEnvelope]:
        out = []
        for env in self._envelopes.values():
            if namespace is not None and env.namespace != namespace:
                continue
            if kind is not None and env.kind != kind:
                continue
            if model_version is not None and env.model_version != model_version:
                continue
            if case_id is not None and env.case_id != case_id:
                continue
            if since is not None and env.created_at < since:
                continue
            if until is not None and env.created_at > until:
                continue
            out.append(env)
        return sorted(out, key=lambda e: (e.created_at, e.seq))

    def __len__(self) -> int:
        return len(self._envelopes)
