"""Dual-reflection machine translation: draft, back-translate, judge, reflect, revise."""

from .backend import ChatRequest, ChatResponse, HttpBackend, ScriptedBackend, ScriptedRule, script_from_file
from .extraction import JudgmentResult, Verdict, parse_final_translation, parse_judgment
from .metrics import DisparityRecord, SimilarityScore, chrf, delta_c, delta_d, pearson
from .pipeline import (
    PipelineResult,
    PipelineState,
    RunConfig,
    TerminationReason,
    TranslationTask,
    resume_state,
    run_pipeline,
    run_zero_shot,
    step,
)
from .stages import Stage
from .transcript import TranscriptEntry, TranscriptStore

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "DisparityRecord",
    "HttpBackend",
    "JudgmentResult",
    "PipelineResult",
    "PipelineState",
    "RunConfig",
    "ScriptedBackend",
    "ScriptedRule",
    "SimilarityScore",
    "Stage",
    "TerminationReason",
    "TranscriptEntry",
    "TranscriptStore",
    "TranslationTask",
    "Verdict",
    "chrf",
    "delta_c",
    "delta_d",
    "parse_final_translation",
    "parse_judgment",
    "pearson",
    "resume_state",
    "run_pipeline",
    "run_zero_shot",
    "script_from_file",
    "step",
]
