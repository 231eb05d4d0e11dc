from __future__ import annotations

import json
from pathlib import Path

import pytest

from dualreflect.backend import Matcher, ScriptedBackend, ScriptedRule
from dualreflect.pipeline import TranslationTask

FIXTURES = Path(__file__).parent / "fixtures"


def stage_backend(**queues) -> ScriptedBackend:
    """Scripted backend with one StageLabel rule per keyword (draft=..., judge=[...])."""
    rules = []
    for stage, responses in queues.items():
        if isinstance(responses, str):
            responses = [responses]
        rules.append(ScriptedRule(Matcher.STAGE_LABEL, stage, tuple(responses)))
    return ScriptedBackend(rules)


def final_json(text: str) -> str:
    return json.dumps({"final_translation": text}, ensure_ascii=False)


@pytest.fixture
def task() -> TranslationTask:
    return TranslationTask("t1", "我们明天去公园。", "Chinese", "English", reference="We are going to the park tomorrow.")


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


# Acceptance criteria outcomes, filled in by test_acceptance.criterion().
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
