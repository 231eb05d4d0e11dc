"""Corpus-level runs: many pipelines over one shared backend.

A run directory holds::

    run.json                  effective configuration and counts
    results.jsonl / .tsv      one row per corpus line, in corpus order
    transcripts/<task>.jsonl  one transcript per task that reached the backend
    export/<run>.*            aligned files for external scorers
"""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .backend import Backend, clone_for_run
from .errors import BackendFailure, DualReflectError, InvalidTask
from .metrics import export_for_external_scoring
from .pipeline import PipelineResult, RunConfig, TerminationReason, TranslationTask, run_pipeline, run_zero_shot
from .prompts import PromptSet
from .transcript import TranscriptStore

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    DUAL_REFLECT = "dual-reflect"
    ZERO_SHOT = "zero-shot"


@dataclass(frozen=True)
class BatchSpec:
    input_path: Path
    source_lang: str
    target_lang: str
    out_dir: Path
    mode: Mode = Mode.DUAL_REFLECT
    config: RunConfig = field(default_factory=RunConfig)
    concurrency: int = 4
    run_id: str | None = None
    overwrite: bool = False
    # Continue from transcripts left by an interrupted run instead of refusing.
    resume: bool = False

    def __post_init__(self) -> None:
        if not self.source_lang.strip() or not self.target_lang.strip():
            raise InvalidTask("language pair needs two non-empty names")
        if self.source_lang == self.target_lang:
            raise InvalidTask("source and target language must differ")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.overwrite and self.resume:
            raise ValueError("overwrite and resume are mutually exclusive")

    @property
    def effective_run_id(self) -> str:
        return self.run_id or Path(self.out_dir).resolve().name


def task_id_for(index: int) -> str:
    return f"seg{index:05d}"


def read_corpus(path: str | Path, source_lang: str, target_lang: str) -> list[TranslationTask]:
    """One task per line; an optional tab separates source from reference.

    Blank lines become tasks too (they fail validation at run time), so task
    ids always match 1-based line numbers.
    """
    tasks = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for index, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            source, _, reference = line.partition("\t")
            tasks.append(
                TranslationTask(
                    id=task_id_for(index),
                    source_text=source,
                    source_lang=source_lang,
                    target_lang=target_lang,
                    reference=reference or None,
                )
            )
    return tasks


@dataclass
class TaskOutcome:
    index: int
    task: TranslationTask
    status: str  # ok | invalid | backend_failure | error
    result: PipelineResult | None = None
    error: str | None = None
    transcript_entries: int = 0

    def row(self) -> dict[str, Any]:
        r = self.result
        return {
            "index": self.index,
            "task_id": self.task.id,
            "source": self.task.source_text,
            "reference": self.task.reference,
            "status": self.status,
            "final_translation": r.final_translation if r else None,
            "iterations_used": r.iterations_used if r else None,
            "termination_reason": (
                r.termination_reason.value if r
                else TerminationReason.BACKEND_FAILURE.value if self.status == "backend_failure"
                else None
            ),
            "fallback_used": r.fallback_used if r else False,
            "prompt_tokens": r.usage.prompt_tokens if r else 0,
            "completion_tokens": r.usage.completion_tokens if r else 0,
            "transcript_entries": self.transcript_entries,
            "finals": [list(f) for f in r.finals] if r else [],
            "error": self.error,
        }


@dataclass
class BatchReport:
    run_id: str
    out_dir: Path
    outcomes: list[TaskOutcome]

    @property
    def succeeded(self) -> list[TaskOutcome]:
        return [o for o in self.outcomes if o.status == "ok"]

    def exit_code(self) -> int:
        if self.succeeded:
            return 0
        if all(o.status == "invalid" for o in self.outcomes):
            return 1
        return 2


def _run_one(index: int, task: TranslationTask, spec: BatchSpec, backend: Backend,
             store: TranscriptStore, prompts: PromptSet | None) -> TaskOutcome:
    try:
        task.validate()
    except InvalidTask as exc:
        return TaskOutcome(index, task, "invalid", error=str(exc))
    runner = run_zero_shot if spec.mode is Mode.ZERO_SHOT else run_pipeline
    recorded = ()
    if spec.resume and store.path_for(task.id).exists():
        recorded = store.load_run(task.id).entries
    sink = store.writer(task.id)
    try:
        result = runner(task, spec.config, clone_for_run(backend), sink=sink, prompts=prompts, run_id=task.id,
                        resume_from=recorded)
    except BackendFailure as exc:
        return TaskOutcome(index, task, "backend_failure", error=str(exc.cause),
                           transcript_entries=len(exc.transcript))
    except DualReflectError as exc:
        logger.exception("task %s failed", task.id)
        return TaskOutcome(index, task, "error", error=f"{type(exc).__name__}: {exc}",
                           transcript_entries=sink.next_seq)
    return TaskOutcome(index, task, "ok", result=result, transcript_entries=len(result.transcript))


def _write_tsv(path: Path, rows: list[dict]) -> None:
    cols = ["task_id", "status", "iterations_used", "termination_reason", "fallback_used", "final_translation"]

    def cell(value) -> str:
        return "" if value is None else str(value).replace("\t", " ").replace("\n", " ")

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(cell(row[c]) for c in cols) + "\n")


def run_batch(spec: BatchSpec, backend: Backend, prompts: PromptSet | None = None,
              settings: dict[str, Any] | None = None, progress=None) -> BatchReport:
    """Run every corpus line through the selected mode and write the run directory."""
    tasks = read_corpus(spec.input_path, spec.source_lang, spec.target_lang)
    out = Path(spec.out_dir)
    transcripts_dir = out / "transcripts"
    if transcripts_dir.exists() and any(transcripts_dir.glob("*.jsonl")) and not spec.resume:
        if not spec.overwrite:
            raise FileExistsError(f"{out} already holds a run; pass overwrite to replace it or resume to continue it")
        for old in transcripts_dir.glob("*.jsonl"):
            old.unlink()
    store = TranscriptStore(transcripts_dir)

    outcomes: list[TaskOutcome] = []
    done = 0
    with ThreadPoolExecutor(max_workers=spec.concurrency) as pool:
        futures = [pool.submit(_run_one, i, t, spec, backend, store, prompts) for i, t in enumerate(tasks, 1)]
        for future in futures:
            outcomes.append(future.result())
            done += 1
            if progress:
                progress(done, len(tasks))
    outcomes.sort(key=lambda o: o.index)

    run_id = spec.effective_run_id
    rows = [o.row() for o in outcomes]
    with open(out / "results.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    _write_tsv(out / "results.tsv", rows)

    ok = [o for o in outcomes if o.status == "ok"]
    export_info = None
    if ok:
        files = export_for_external_scoring(
            [(o.task, o.result.final_translation) for o in ok], out / "export", run_id
        )
        export_info = {k: (str(Path(v).relative_to(out)) if v else None) for k, v in asdict(files).items()}

    manifest = {
        "run_id": run_id,
        "mode": spec.mode.value,
        "source_lang": spec.source_lang,
        "target_lang": spec.target_lang,
        "input": str(spec.input_path),
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec.config).items()},
        "settings": settings or {},
        "concurrency": spec.concurrency,
        "counts": {
            status: sum(1 for o in outcomes if o.status == status)
            for status in ("ok", "invalid", "backend_failure", "error")
        },
        "export": export_info,
    }
    (out / "run.json").write_text(json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return BatchReport(run_id, out, outcomes)
