"""Append-only JSONL transcripts, one file per run.

Every line is a self-describing record carrying ``schema_version``. Appends
are flushed and fsynced before returning, so a crash leaves a prefix of the
logical transcript on disk (at worst plus one torn final line, which loading
reports and skips).
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .errors import RunNotFound, SequenceError
from .prompts import MessageSequence, messages_from_dicts, messages_to_dicts
from .stages import Stage

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Fields excluded from canonical (determinism-comparable) form.
VOLATILE_FIELDS = frozenset({"started_at", "ended_at", "latency"})

_UNICODE_BREAKS = re.compile("[\x85\u2028\u2029]")


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


@dataclass(frozen=True)
class TranscriptEntry:
    run_id: str
    task_id: str
    seq: int
    stage: Stage
    iteration: int
    rendered_prompt: MessageSequence
    raw_output: str
    parsed_summary: str | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    attempts: int = 1
    latency: float = 0.0
    started_at: str = ""
    ended_at: str = ""
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "run_id": self.run_id,
            "task_id": self.task_id,
            "seq": self.seq,
            "stage": self.stage.value,
            "iteration": self.iteration,
            "rendered_prompt": messages_to_dicts(self.rendered_prompt),
            "raw_output": self.raw_output,
            "parsed_summary": self.parsed_summary,
            "usage": {
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
                "attempts": self.attempts,
            },
            "latency": self.latency,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TranscriptEntry":
        usage = data.get("usage") or {}
        return cls(
            run_id=data["run_id"],
            task_id=data["task_id"],
            seq=int(data["seq"]),
            stage=Stage(data["stage"]),
            iteration=int(data["iteration"]),
            rendered_prompt=messages_from_dicts(data["rendered_prompt"]),
            raw_output=data["raw_output"],
            parsed_summary=data.get("parsed_summary"),
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            attempts=int(usage.get("attempts", 1)),
            latency=float(data.get("latency", 0.0)),
            started_at=data.get("started_at", ""),
            ended_at=data.get("ended_at", ""),
            warnings=tuple(data.get("warnings", ())),
        )

    def to_json(self) -> str:
        text = json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)
        # Keep one record per physical line for readers that split on NEL/U+2028/U+2029.
        return _UNICODE_BREAKS.sub(lambda m: f"\\u{ord(m.group()):04x}", text)

    def canonical(self) -> str:
        data = {k: v for k, v in self.to_dict().items() if k not in VOLATILE_FIELDS}
        return json.dumps(data, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def canonical_transcript(entries) -> str:
    return "\n".join(e.canonical() for e in entries)


@dataclass(frozen=True)
class CorruptLine:
    line_number: int
    error: str


@dataclass
class LoadedRun:
    run_id: str
    entries: list[TranscriptEntry] = field(default_factory=list)
    corrupt_lines: list[CorruptLine] = field(default_factory=list)


_SAFE_RUN_ID = re.compile(r"^[A-Za-z0-9._-]+$")


def _file_name(run_id: str) -> str:
    if not _SAFE_RUN_ID.match(run_id) or run_id in {".", ".."}:
        raise ValueError(f"run id {run_id!r} is not file-name safe")
    return run_id + ".jsonl"


def parse_lines(run_id: str, lines) -> LoadedRun:
    """Parse transcript lines (text or raw bytes); bad lines are reported, not fatal."""
    loaded = LoadedRun(run_id)
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            if isinstance(line, bytes):
                # A torn write can split a multi-byte character.
                line = line.decode("utf-8")
            loaded.entries.append(TranscriptEntry.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            loaded.corrupt_lines.append(CorruptLine(number, f"{type(exc).__name__}: {exc}"))
            logger.warning("run %s: corrupt transcript line %d", run_id, number)
    loaded.entries.sort(key=lambda e: e.seq)
    return loaded


class TranscriptWriter:
    """Single writer for one run's transcript file."""

    def __init__(self, path: Path, run_id: str, next_seq: int = 0) -> None:
        self.path = path
        self.run_id = run_id
        self.next_seq = next_seq
        self._lock = threading.Lock()

    def append(self, entry: TranscriptEntry) -> None:
        if entry.run_id != self.run_id:
            raise SequenceError(f"entry for run {entry.run_id!r} sent to writer of {self.run_id!r}")
        line = entry.to_json() + "\n"
        with self._lock:
            if entry.seq != self.next_seq:
                raise SequenceError(
                    f"run {self.run_id}: expected seq {self.next_seq}, got {entry.seq}"
                )
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            self.next_seq += 1


class TranscriptStore:
    """Directory of per-run transcript files."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._writers: dict[str, TranscriptWriter] = {}

    def path_for(self, run_id: str) -> Path:
        return self.root / _file_name(run_id)

    def writer(self, run_id: str) -> TranscriptWriter:
        """Writer for ``run_id``; an existing file is resumed after its last seq."""
        with self._lock:
            if run_id in self._writers:
                return self._writers[run_id]
            path = self.path_for(run_id)
            next_seq = 0
            if path.exists():
                loaded = self.load_run(run_id)
                if loaded.entries:
                    next_seq = loaded.entries[-1].seq + 1
                with open(path, "rb+") as fh:
                    fh.seek(0, os.SEEK_END)
                    if fh.tell():
                        fh.seek(-1, os.SEEK_END)
                        if fh.read(1) != b"\n":
                            # Isolate a torn final line from the next append.
                            fh.write(b"\n")
            else:
                path.touch()
            writer = TranscriptWriter(path, run_id, next_seq)
            self._writers[run_id] = writer
            return writer

    def load_run(self, run_id: str) -> LoadedRun:
        path = self.path_for(run_id)
        if not path.exists():
            raise RunNotFound(f"no transcript for run {run_id!r} in {self.root}")
        with open(path, "rb") as fh:
            return parse_lines(run_id, fh)

    def run_ids(self) -> list[str]:
        ids = []
        for path in sorted(self.root.glob("*.jsonl")):
            with open(path, encoding="utf-8", errors="replace") as fh:
                first = fh.readline()
            try:
                ids.append(json.loads(first)["run_id"])
            except (ValueError, KeyError, TypeError):
                continue
        return ids


def load_run(root: str | Path, run_id: str) -> LoadedRun:
    return TranscriptStore(root).load_run(run_id)
