import random
import socket

import pytest

from dualreflect.backend import HttpBackend
from dualreflect.errors import BackendFailure, IllegalState, InvalidTask, ScriptError, SequenceError
from dualreflect.pipeline import (
    PipelineState,
    RunConfig,
    TerminationReason,
    TranslationTask,
    max_calls,
    resume_state,
    run_pipeline,
    run_zero_shot,
    stage_order_ok,
    stage_word,
    step,
)
from dualreflect.stages import Stage
from dualreflect.transcript import TranscriptStore, canonical_transcript

from .conftest import final_json, stage_backend

DRAFT = "We go to park tomorrow."
REVISED = "We are going to the park tomorrow."
BACK = "我们明天去公园。"
REFLECTION = "Analysis: the tense is off.\nSuggestions: use the progressive form."


def converge_once():
    return stage_backend(draft=DRAFT, back=BACK, judge="False", extract=final_json(DRAFT))


def always_true(max_iter=3, extract=None):
    return stage_backend(
        draft=DRAFT,
        back=[BACK] * max_iter,
        judge=["True, the tense differs."] * max_iter,
        reflect=[REFLECTION] * max_iter,
        revise=[f"{REVISED} v{i}" for i in range(1, max_iter + 1)],
        extract=extract or final_json(REVISED),
    )


def test_converges_in_one_iteration(task):
    result = run_pipeline(task, RunConfig(), converge_once())
    assert len(result.transcript) == 4
    assert stage_word(result.transcript) == "DBJE"
    assert result.termination_reason is TerminationReason.CONVERGED
    assert result.iterations_used == 1
    assert result.final_translation == DRAFT
    assert not result.fallback_used


def test_iteration_cap(task):
    result = run_pipeline(task, RunConfig(max_iterations=3), always_true())
    word = stage_word(result.transcript)
    assert word == "DBJRVBJRVBJE"
    assert (word.count("J"), word.count("R"), word.count("V"), word.count("E")) == (3, 2, 2, 1)
    assert result.termination_reason is TerminationReason.ITERATION_CAP
    assert result.iterations_used == 3
    assert len(result.transcript) <= max_calls(RunConfig(max_iterations=3))
    extract = result.transcript[-1]
    assert f"{REVISED} v2" in extract.rendered_prompt[-1].content


def test_converged_on_last_allowed_iteration(task):
    b = stage_backend(draft=DRAFT, back=[BACK] * 2, judge=["True, x", "False"], reflect=REFLECTION,
                      revise=REVISED, extract=final_json(REVISED))
    result = run_pipeline(task, RunConfig(max_iterations=2), b)
    assert result.termination_reason is TerminationReason.CONVERGED
    assert result.iterations_used == 2


def test_iteration_labels(task):
    result = run_pipeline(task, RunConfig(max_iterations=3), always_true())
    assert [(e.stage.letter, e.iteration) for e in result.transcript] == [
        ("D", 0), ("B", 1), ("J", 1), ("R", 1), ("V", 1), ("B", 2), ("J", 2), ("R", 2), ("V", 2),
        ("B", 3), ("J", 3), ("E", 3),
    ]
    assert [e.seq for e in result.transcript] == list(range(12))


def test_stage_inputs_are_threaded(task):
    b = always_true(2)
    run_pipeline(task, RunConfig(max_iterations=2), b)
    by_stage = {}
    for req in b.calls:
        by_stage.setdefault(req.stage, []).append("\n".join(m.content for m in req.messages))
    assert DRAFT in by_stage["back"][0]
    assert f"{REVISED} v1" in by_stage["back"][1]
    assert BACK in by_stage["judge"][0] and task.source_text in by_stage["judge"][0]
    assert BACK in by_stage["reflect"][0]
    assert "the tense is off" in by_stage["revise"][0]
    assert "use the progressive form" in by_stage["revise"][0]
    assert "Chinese" in by_stage["draft"][0] and "English" in by_stage["draft"][0]


def test_empty_source_makes_no_calls():
    b = converge_once()
    with pytest.raises(InvalidTask):
        run_pipeline(TranslationTask("t", "  \n", "Chinese", "English"), RunConfig(), b)
    with pytest.raises(InvalidTask):
        run_zero_shot(TranslationTask("t", "x", "French", "French"), RunConfig(), b)
    assert b.calls == []


def test_zero_shot():
    task = TranslationTask("z", "Hello", "English", "French")
    b = stage_backend(draft="Bonjour", extract=final_json("Bonjour"))
    result = run_zero_shot(task, RunConfig(), b)
    assert len(result.transcript) == 2
    assert stage_word(result.transcript) == "DE"
    assert result.final_translation == "Bonjour"
    assert result.iterations_used == 0


def test_unreachable_backend(task):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    backend = HttpBackend(f"http://127.0.0.1:{port}/v1", max_attempts=2, sleep=lambda _: None,
                          rng=random.Random(0))
    with pytest.raises(BackendFailure) as info:
        run_pipeline(task, RunConfig(), backend)
    assert info.value.transcript == ()


def test_failure_mid_run_keeps_prefix(task, tmp_path):
    b = stage_backend(draft=DRAFT, back=BACK, judge="True, x", reflect=REFLECTION)
    sink = TranscriptStore(tmp_path).writer("r")
    with pytest.raises(BackendFailure) as info:
        run_pipeline(task, RunConfig(), b, sink=sink, run_id="r")
    assert isinstance(info.value.cause, ScriptError)
    assert stage_word(info.value.transcript) == "DBJR"
    assert TranscriptStore(tmp_path).load_run("r").entries == list(info.value.transcript)


def test_blank_draft_is_backend_failure(task):
    b = stage_backend(draft="   ")
    with pytest.raises(BackendFailure) as info:
        run_pipeline(task, RunConfig(), b)
    assert len(info.value.transcript) == 1


def test_step_adds_one_entry_and_rejects_terminated(task):
    b = converge_once()
    config = RunConfig()
    state = PipelineState.start(task)
    stages = []
    while not state.terminated:
        before = len(state.transcript)
        stages.append(state.next_stage)
        state = step(state, config, b)
        assert len(state.transcript) == before + 1
    assert stages == [Stage.DRAFT, Stage.BACK, Stage.JUDGE, Stage.EXTRACT]
    assert state.final_translation == DRAFT
    with pytest.raises(IllegalState):
        step(state, config, b)
    assert len(b.calls) == 4


def test_replay_is_deterministic(task):
    one = run_pipeline(task, RunConfig(), always_true())
    two = run_pipeline(task, RunConfig(), always_true())
    assert canonical_transcript(one.transcript) == canonical_transcript(two.transcript)
    assert one.final_translation == two.final_translation


def test_sink_matches_result(task, tmp_path):
    store = TranscriptStore(tmp_path)
    result = run_pipeline(task, RunConfig(), always_true(), sink=store.writer("run1"), run_id="run1")
    loaded = store.load_run("run1")
    assert loaded.entries == list(result.transcript)
    assert result.usage.prompt_tokens == sum(e.prompt_tokens for e in loaded.entries) > 0


def test_forced_extraction_mode(task):
    config = RunConfig(max_iterations=3, force_extraction_each_iteration=True)
    b = stage_backend(
        draft=DRAFT, back=[BACK] * 3, judge=["False"] * 3, reflect=[REFLECTION] * 2,
        revise=["v1", "v2"], extract=[final_json("v1"), final_json("v2"), final_json("v2")],
    )
    result = run_pipeline(task, config, b)
    assert stage_word(result.transcript) == "DBJRVEBJRVEBJE"
    assert stage_order_ok(result.transcript, forced=True)
    assert result.finals == ((1, "v1"), (2, "v2"), (3, "v2"))
    assert result.iterations_used == 3
    assert result.termination_reason is TerminationReason.CONVERGED
    assert len(result.transcript) <= max_calls(config)


def test_unparseable_judgment_continues(task):
    b = stage_backend(draft=DRAFT, back=[BACK] * 2, judge=["maybe?", "False"], reflect=REFLECTION,
                      revise=REVISED, extract=final_json(REVISED))
    result = run_pipeline(task, RunConfig(), b)
    assert stage_word(result.transcript) == "DBJRVBJE"
    assert any("unparseable judgment" in w for w in result.warnings)


def test_extraction_fallback(task):
    b = stage_backend(draft=DRAFT, back=BACK, judge="False", extract="I cannot do that.")
    result = run_pipeline(task, RunConfig(), b)
    assert result.fallback_used
    assert result.final_translation == DRAFT
    assert any("last draft" in w for w in result.warnings)
    assert stage_order_ok(result.transcript)


def test_reask_recovers(task):
    b = stage_backend(draft=DRAFT, back=BACK, judge="False", extract=["garbage", final_json("Fixed.")])
    config = RunConfig(reask_on_parse_failure=True)
    result = run_pipeline(task, config, b)
    assert stage_word(result.transcript) == "DBJEE"
    assert stage_order_ok(result.transcript, reask=True)
    assert not stage_order_ok(result.transcript)
    assert result.final_translation == "Fixed." and not result.fallback_used


def test_reask_then_fallback(task):
    b = stage_backend(draft=DRAFT, back=BACK, judge="False", extract=["garbage", "still garbage"])
    result = run_pipeline(task, RunConfig(reask_on_parse_failure=True), b)
    assert stage_word(result.transcript) == "DBJEE"
    assert result.fallback_used and result.final_translation == DRAFT


@pytest.mark.parametrize("kw", [{"temperature": -1}, {"max_iterations": 0}, {"max_output_tokens": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_max_calls():
    assert max_calls(RunConfig(max_iterations=3)) == 14
    assert max_calls(RunConfig(max_iterations=1)) == 6


def test_resume_continues_to_identical_transcript(task, tmp_path):
    full = run_pipeline(task, RunConfig(), always_true(), run_id="r")
    for k in range(len(full.transcript) + 1):
        store = TranscriptStore(tmp_path / str(k))
        writer = store.writer("r")
        for e in full.transcript[:k]:
            writer.append(e)
        backend = always_true()
        resumed = run_pipeline(task, RunConfig(), backend, sink=writer, run_id="r", resume_from=full.transcript[:k])
        assert canonical_transcript(resumed.transcript) == canonical_transcript(full.transcript)
        assert canonical_transcript(store.load_run("r").entries) == canonical_transcript(full.transcript)
        assert len(backend.calls) == len(full.transcript) - k
        assert resumed.final_translation == full.final_translation


def test_resume_rejects_foreign_transcript(task):
    other = TranslationTask("t1", "完全不同的句子。", "Chinese", "English")
    recorded = run_pipeline(other, RunConfig(), converge_once(), run_id="t1").transcript
    with pytest.raises(SequenceError):
        resume_state(task, RunConfig(), recorded[:2])
    with pytest.raises(SequenceError):
        resume_state(task, RunConfig(), recorded[1:2])


def test_resume_rejects_entries_past_termination(task):
    recorded = run_pipeline(task, RunConfig(), converge_once()).transcript
    with pytest.raises(SequenceError):
        resume_state(task, RunConfig(), recorded + recorded[-1:])


def test_resume_detects_script_divergence(task):
    recorded = run_pipeline(task, RunConfig(), converge_once()).transcript
    changed = stage_backend(draft="Something else.", back=BACK, judge="False", extract=final_json(DRAFT))
    with pytest.raises(SequenceError, match="diverges"):
        run_pipeline(task, RunConfig(), changed, resume_from=recorded[:1])
