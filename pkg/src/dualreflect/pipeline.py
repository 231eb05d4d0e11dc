"""The dual-reflection translation state machine.

One run issues a draft translation, then loops back-translation, judgment,
reflection and revision until the judge reports that the back-translation
matches the source or the iteration cap is reached. An extraction call then
pulls the final translation out of the last draft.

Every backend call produces exactly one TranscriptEntry. ``step`` advances
the machine by one call; ``run_pipeline`` drives it to termination.
"""

from __future__ import annotations

import enum
import logging
import re
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Protocol, Sequence

from . import prompts as P
from .backend import Backend, ChatRequest, ChatResponse, Usage
from .errors import (
    BackendError,
    BackendFailure,
    ExtractionFailure,
    IllegalState,
    InvalidTask,
    MalformedResponse,
    SequenceError,
    UnparseableJudgment,
)
from .extraction import Verdict, parse_final_translation, parse_judgment, split_reflection
from .stages import Stage
from .transcript import TranscriptEntry, utc_now

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TranslationTask:
    id: str
    source_text: str
    source_lang: str
    target_lang: str
    reference: str | None = None

    def validate(self) -> None:
        if not self.source_text.strip():
            raise InvalidTask(f"task {self.id!r}: source text is empty")
        if not self.source_lang.strip() or not self.target_lang.strip():
            raise InvalidTask(f"task {self.id!r}: language names must be non-empty")
        if self.source_lang == self.target_lang:
            raise InvalidTask(f"task {self.id!r}: source and target language are both {self.source_lang!r}")


@dataclass(frozen=True)
class RunConfig:
    backend_id: str = "http"
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    max_iterations: int = 3
    force_extraction_each_iteration: bool = False
    metric: str = "chrf"
    max_output_tokens: int | None = None
    stop: tuple[str, ...] | None = None
    # One repeated extraction call before falling back to the raw draft.
    reask_on_parse_failure: bool = False

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.max_output_tokens is not None and self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


class TerminationReason(str, enum.Enum):
    CONVERGED = "Converged"
    ITERATION_CAP = "IterationCapReached"
    BACKEND_FAILURE = "BackendFailure"


class TranscriptSink(Protocol):
    def append(self, entry: TranscriptEntry) -> None: ...


@dataclass(frozen=True)
class PipelineState:
    task: TranslationTask
    run_id: str
    iteration: int = 0
    draft: str | None = None
    back_translation: str | None = None
    analysis: str | None = None
    suggestions: str | None = None
    terminated: bool = False
    final_translation: str | None = None
    next_stage: Stage = Stage.DRAFT
    zero_shot: bool = False
    # Set when the loop exits; the run terminates after the next extraction.
    termination_reason: TerminationReason | None = None
    fallback_used: bool = False
    reasked: bool = False
    finals: tuple[tuple[int, str], ...] = ()
    transcript: tuple[TranscriptEntry, ...] = ()

    @classmethod
    def start(cls, task: TranslationTask, run_id: str | None = None, zero_shot: bool = False) -> "PipelineState":
        return cls(task=task, run_id=run_id or task.id, zero_shot=zero_shot)


@dataclass(frozen=True)
class PipelineResult:
    run_id: str
    task_id: str
    final_translation: str
    iterations_used: int
    termination_reason: TerminationReason
    transcript: tuple[TranscriptEntry, ...]
    usage: Usage = field(default_factory=Usage)
    fallback_used: bool = False
    finals: tuple[tuple[int, str], ...] = ()

    @property
    def warnings(self) -> list[str]:
        return [w for e in self.transcript for w in e.warnings]


def _call(
    state: PipelineState,
    stage: Stage,
    messages: P.MessageSequence,
    config: RunConfig,
    backend: Backend,
) -> tuple[ChatResponse, str, str]:
    request = ChatRequest(
        model=config.model,
        messages=messages,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        stop=config.stop,
        stage=stage.value,
    )
    started = utc_now()
    t0 = time.monotonic()
    try:
        response = backend.complete(request)
    except BackendError as exc:
        logger.warning("run %s: %s call failed: %s", state.run_id, stage.value, exc)
        raise BackendFailure(exc, state.transcript) from exc
    if response.latency == 0.0:
        response = replace(response, latency=time.monotonic() - t0)
    return response, started, utc_now()


def _record(
    state: PipelineState,
    sink: TranscriptSink | None,
    stage: Stage,
    iteration: int,
    messages: P.MessageSequence,
    response: ChatResponse,
    started: str,
    ended: str,
    summary: str | None,
    warnings: Iterable[str] = (),
) -> tuple[TranscriptEntry, ...]:
    entry = TranscriptEntry(
        run_id=state.run_id,
        task_id=state.task.id,
        seq=len(state.transcript),
        stage=stage,
        iteration=iteration,
        rendered_prompt=messages,
        raw_output=response.content,
        parsed_summary=summary,
        prompt_tokens=response.usage.prompt_tokens,
        completion_tokens=response.usage.completion_tokens,
        attempts=response.attempts,
        latency=response.latency,
        started_at=started,
        ended_at=ended,
        warnings=tuple(warnings),
    )
    if sink is not None:
        sink.append(entry)
    return state.transcript + (entry,)


def _require_text(state: PipelineState, transcript, stage: Stage, text: str) -> None:
    if not text.strip():
        raise BackendFailure(MalformedResponse(f"empty {stage.value} output"), transcript)


def step(
    state: PipelineState,
    config: RunConfig,
    backend: Backend,
    *,
    sink: TranscriptSink | None = None,
    prompts: P.PromptSet | None = None,
) -> PipelineState:
    """Advance ``state`` by exactly one stage (one backend call)."""
    if state.terminated:
        raise IllegalState(f"run {state.run_id} already terminated")
    task = state.task
    stage = state.next_stage

    if stage is Stage.DRAFT:
        msgs = P.render_draft(task.source_text, task.source_lang, task.target_lang, prompts)
        resp, t0, t1 = _call(state, stage, msgs, config, backend)
        draft = resp.content.strip()
        transcript = _record(state, sink, stage, 0, msgs, resp, t0, t1, None)
        _require_text(state, transcript, stage, draft)
        if state.zero_shot:
            return replace(state, draft=draft, transcript=transcript, next_stage=Stage.EXTRACT,
                           termination_reason=TerminationReason.CONVERGED)
        return replace(state, draft=draft, transcript=transcript, next_stage=Stage.BACK)

    if stage is Stage.BACK:
        msgs = P.render_back(state.draft, task.target_lang, task.source_lang, prompts)
        resp, t0, t1 = _call(state, stage, msgs, config, backend)
        back = resp.content.strip()
        transcript = _record(state, sink, stage, state.iteration + 1, msgs, resp, t0, t1, None)
        _require_text(state, transcript, stage, back)
        return replace(state, back_translation=back, transcript=transcript, next_stage=Stage.JUDGE)

    if stage is Stage.JUDGE:
        msgs = P.render_judgment(task.source_text, state.back_translation, task.source_lang, prompts)
        resp, t0, t1 = _call(state, stage, msgs, config, backend)
        iteration = state.iteration + 1
        warnings = []
        try:
            judgment = parse_judgment(resp.content)
            verdict = judgment.verdict
            summary = verdict.value if verdict is Verdict.CONVERGED else f"Continue: {judgment.explanation or ''}"
        except UnparseableJudgment:
            verdict = Verdict.CONTINUE
            summary = f"Continue: {resp.content.strip()}"
            warnings.append("unparseable judgment; treated as Continue")
        transcript = _record(state, sink, stage, iteration, msgs, resp, t0, t1, summary, warnings)

        converged = verdict is Verdict.CONVERGED
        at_cap = iteration >= config.max_iterations
        reason = None
        if at_cap:
            reason = TerminationReason.CONVERGED if converged else TerminationReason.ITERATION_CAP
        elif converged and not config.force_extraction_each_iteration:
            reason = TerminationReason.CONVERGED
        return replace(
            state,
            iteration=iteration,
            transcript=transcript,
            termination_reason=reason,
            next_stage=Stage.EXTRACT if reason else Stage.REFLECT,
        )

    if stage is Stage.REFLECT:
        msgs = P.render_reflection(state.back_translation, task.source_text, prompts)
        resp, t0, t1 = _call(state, stage, msgs, config, backend)
        analysis, suggestions = split_reflection(resp.content)
        transcript = _record(state, sink, stage, state.iteration, msgs, resp, t0, t1, None)
        return replace(state, analysis=analysis, suggestions=suggestions, transcript=transcript,
                       next_stage=Stage.REVISE)

    if stage is Stage.REVISE:
        msgs = P.render_revision(state.analysis, state.suggestions, task.source_text,
                                 task.source_lang, task.target_lang, prompts)
        resp, t0, t1 = _call(state, stage, msgs, config, backend)
        draft = resp.content.strip()
        transcript = _record(state, sink, stage, state.iteration, msgs, resp, t0, t1, None)
        _require_text(state, transcript, stage, draft)
        return replace(
            state,
            draft=draft,
            back_translation=None,
            analysis=None,
            suggestions=None,
            transcript=transcript,
            next_stage=Stage.EXTRACT if config.force_extraction_each_iteration else Stage.BACK,
        )

    if stage is Stage.EXTRACT:
        msgs = P.render_extraction(state.draft, prompts)
        resp, t0, t1 = _call(state, stage, msgs, config, backend)
        warnings = []
        try:
            text = parse_final_translation(resp.content).final_translation
            fallback = False
        except ExtractionFailure:
            if config.reask_on_parse_failure and not state.reasked:
                warnings.append("extraction unparseable; asking again")
                transcript = _record(state, sink, stage, state.iteration, msgs, resp, t0, t1, None, warnings)
                return replace(state, transcript=transcript, reasked=True)
            text = state.draft
            fallback = True
            warnings.append("extraction unparseable; using last draft verbatim")
        transcript = _record(state, sink, stage, state.iteration, msgs, resp, t0, t1, text, warnings)
        finals = state.finals + ((state.iteration, text),)
        if state.termination_reason is None:
            # Intermediate extraction in forced-extraction mode.
            return replace(state, transcript=transcript, finals=finals, reasked=False,
                           next_stage=Stage.BACK)
        return replace(state, transcript=transcript, finals=finals, reasked=False,
                       terminated=True, final_translation=text, fallback_used=fallback)

    raise IllegalState(f"unknown stage {stage!r}")


def _result(state: PipelineState) -> PipelineResult:
    usage = Usage()
    for e in state.transcript:
        usage = usage + Usage(e.prompt_tokens, e.completion_tokens)
    return PipelineResult(
        run_id=state.run_id,
        task_id=state.task.id,
        final_translation=state.final_translation,
        iterations_used=state.iteration,
        termination_reason=state.termination_reason,
        transcript=state.transcript,
        usage=usage,
        fallback_used=state.fallback_used,
        finals=state.finals,
    )


def _drive(state: PipelineState, config, backend, sink, prompts) -> PipelineResult:
    while not state.terminated:
        state = step(state, config, backend, sink=sink, prompts=prompts)
    return _result(state)


class _Replay:
    """Answers each request from the recorded entry at the same position."""

    def __init__(self, entries: Sequence[TranscriptEntry], live: Backend | None) -> None:
        self._entries = iter(entries)
        self._live = live

    def complete(self, request: ChatRequest) -> ChatResponse:
        entry = next(self._entries)
        if entry.stage.value != request.stage or tuple(entry.rendered_prompt) != tuple(request.messages):
            raise SequenceError(f"recorded entry {entry.seq} does not match the {request.stage} request")
        advance = getattr(self._live, "advance", None)
        if advance is not None:
            try:
                advance(request, entry.raw_output)
            except BackendError as exc:
                raise SequenceError(f"cannot replay entry {entry.seq}: {exc}") from exc
        return ChatResponse(entry.raw_output, Usage(entry.prompt_tokens, entry.completion_tokens),
                            entry.latency, entry.attempts)


def resume_state(
    task: TranslationTask,
    config: RunConfig,
    entries: Sequence[TranscriptEntry],
    *,
    backend: Backend | None = None,
    prompts: P.PromptSet | None = None,
    run_id: str | None = None,
    zero_shot: bool = False,
) -> PipelineState:
    """Rebuild the state a run had after ``entries`` without calling a backend.

    Each recorded entry must match the request the machine would issue at
    that point, so a transcript from another task or config is rejected.
    A backend with an ``advance`` method (the scripted one) is moved past the
    recorded calls.
    """
    entries = list(entries)
    if [e.seq for e in entries] != list(range(len(entries))):
        raise SequenceError("recorded transcript is not a contiguous prefix starting at seq 0")
    state = PipelineState.start(task, run_id, zero_shot)
    if any(e.run_id != state.run_id for e in entries):
        raise SequenceError(f"recorded transcript belongs to another run than {state.run_id!r}")
    replay = _Replay(entries, backend)
    for _ in entries:
        if state.terminated:
            raise SequenceError("recorded transcript continues past termination")
        state = step(state, config, replay, prompts=prompts)
    return replace(state, transcript=tuple(entries))


def run_pipeline(
    task: TranslationTask,
    config: RunConfig,
    backend: Backend,
    *,
    sink: TranscriptSink | None = None,
    prompts: P.PromptSet | None = None,
    run_id: str | None = None,
    resume_from: Sequence[TranscriptEntry] | None = None,
) -> PipelineResult:
    """Translate ``task`` with the full reflection loop.

    ``resume_from`` continues an interrupted run from its recorded entries;
    ``sink`` then only receives the new ones.
    """
    task.validate()
    state = PipelineState.start(task, run_id)
    if resume_from:
        state = resume_state(task, config, resume_from, backend=backend, prompts=prompts, run_id=run_id)
    return _drive(state, config, backend, sink, prompts)


def run_zero_shot(
    task: TranslationTask,
    config: RunConfig,
    backend: Backend,
    *,
    sink: TranscriptSink | None = None,
    prompts: P.PromptSet | None = None,
    run_id: str | None = None,
    resume_from: Sequence[TranscriptEntry] | None = None,
) -> PipelineResult:
    """Baseline: the draft translation alone, passed through extraction."""
    task.validate()
    state = PipelineState.start(task, run_id, zero_shot=True)
    if resume_from:
        state = resume_state(task, config, resume_from, backend=backend, prompts=prompts, run_id=run_id,
                             zero_shot=True)
    return _drive(state, config, backend, sink, prompts)


def stage_word(entries: Iterable[TranscriptEntry]) -> str:
    return "".join(e.stage.letter for e in entries)


def stage_order_pattern(forced: bool = False, reask: bool = False) -> re.Pattern:
    """Regular language of legal stage sequences, one letter per call.

    D=draft B=back J=judge R=reflect V=revise E=extract.
    """
    ext = "E{1,2}" if reask else "E"
    round_ = f"BJ(RV{ext})?" if forced else "BJ(RV)?"
    return re.compile(f"D({round_})+{ext}")


def stage_order_ok(entries: Iterable[TranscriptEntry], forced: bool = False, reask: bool = False) -> bool:
    return stage_order_pattern(forced, reask).fullmatch(stage_word(entries)) is not None


def max_calls(config: RunConfig) -> int:
    """Upper bound on backend calls for one run under ``config``."""
    ext = 2 if config.reask_on_parse_failure else 1
    if config.force_extraction_each_iteration:
        return 1 + (config.max_iterations - 1) * (4 + ext) + 2 + ext
    return 2 + ext - 1 + 4 * config.max_iterations
