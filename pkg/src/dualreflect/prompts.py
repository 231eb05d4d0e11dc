"""Prompt templates for the five pipeline stages and their renderer.

Each template has an ``instruction`` part, sent as the system message, and an
``input`` part carrying the user-supplied texts, sent as a single user message.
Placeholders use ``{name}`` syntax and are substituted in one pass, so text that
looks like a placeholder inside a substituted value is never expanded.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

from .errors import PromptRenderError
from .stages import Stage

PLACEHOLDERS = frozenset({"source_lang", "target_lang", "x", "y", "x_prime", "AR", "TS"})

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class Message:
    role: str  # "system" or "user"
    content: str

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


MessageSequence = tuple[Message, ...]


def messages_to_dicts(messages: MessageSequence) -> list[dict[str, str]]:
    return [m.to_dict() for m in messages]


def messages_from_dicts(items) -> MessageSequence:
    return tuple(Message(role=d["role"], content=d["content"]) for d in items)


def prompt_text(messages: MessageSequence) -> str:
    """Flatten a message sequence to one string (used for prompt matching)."""
    return "\n\n".join(m.content for m in messages)


@dataclass(frozen=True)
class PromptTemplate:
    stage: Stage
    instruction: str
    input: str

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.instruction)) | set(
            _PLACEHOLDER_RE.findall(self.input)
        )


def _block(label: str, placeholder: str) -> str:
    return f"[{label}]\n{{{placeholder}}}\n[/{label}]"


_TRANSLATE = "Translate the following text from {source_lang} to {target_lang}:"

_DEFAULTS = {
    Stage.DRAFT: PromptTemplate(Stage.DRAFT, _TRANSLATE, _block("Input Text", "x")),
    # Back-translation reuses the draft instruction with the languages swapped.
    Stage.BACK: PromptTemplate(Stage.BACK, _TRANSLATE, _block("Input Text", "x")),
    Stage.JUDGE: PromptTemplate(
        Stage.JUDGE,
        "If you are a {source_lang} linguist, Determine whether the following two "
        "sentences provided by user convey the same meaning and style, including "
        "subtleties. If so, give 'False' response without any explanation, otherwise "
        "give 'True' response and explain the reason.",
        _block("Source Sentence", "x") + "\n\n" + _block("Back Translation Output", "x_prime"),
    ),
    Stage.EXTRACT: PromptTemplate(
        Stage.EXTRACT,
        "Please summarize the input information, you need to extract the final "
        "translation result from the paragraph. Now, please output your answer in "
        "JSON format, as follows: {'final_translation': ''}. Please strictly follow "
        "the JSON format and do not output irrelevant content.",
        _block("Target Sentence", "y"),
    ),
    Stage.REFLECT: PromptTemplate(
        Stage.REFLECT,
        "Compare the two sentences provided by the user. It aims to analyze the "
        "disparities between them in meaning, style, and subtleties, first provide "
        "analytical results, and then suggest how to revise them to make the two "
        "sentences consistent.",
        _block("Back Translation", "x_prime") + "\n\n" + _block("Source Sentence", "x"),
    ),
    Stage.REVISE: PromptTemplate(
        Stage.REVISE,
        _TRANSLATE,
        _block("Analysis Results", "AR")
        + "\n\n"
        + _block("Translation Suggestions", "TS")
        + "\n\n"
        + _block("Source Sentence", "x"),
    ),
}

_STAGE_ALIASES = {
    "draft": Stage.DRAFT,
    "back": Stage.BACK,
    "judge": Stage.JUDGE,
    "judgment": Stage.JUDGE,
    "extract": Stage.EXTRACT,
    "extraction": Stage.EXTRACT,
    "reflect": Stage.REFLECT,
    "reflection": Stage.REFLECT,
    "revise": Stage.REVISE,
    "revision": Stage.REVISE,
}


class PromptSet:
    """An immutable mapping of stage to template."""

    def __init__(self, templates: Mapping[Stage, PromptTemplate]) -> None:
        missing = set(_DEFAULTS) - set(templates)
        if missing:
            raise PromptRenderError(f"missing templates: {sorted(s.value for s in missing)}")
        for tpl in templates.values():
            unknown = tpl.placeholders() - PLACEHOLDERS
            if unknown:
                raise PromptRenderError(
                    f"template {tpl.stage.value!r} uses unknown placeholders {sorted(unknown)}"
                )
        self._templates = MappingProxyType(dict(templates))

    def __getitem__(self, stage: Stage) -> PromptTemplate:
        return self._templates[stage]

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptSet":
        """Load overrides from a JSON file keyed by stage name.

        Each value is either a string (replaces the instruction) or an object
        with optional ``instruction`` and ``input`` keys. Absent stages and keys
        keep the built-in wording. An overridden draft template also becomes
        the back-translation template unless ``back`` is given explicitly.
        """
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise PromptRenderError("template file must hold an object keyed by stage name")
        overrides: dict[Stage, dict[str, str]] = {}
        for key, value in raw.items():
            stage = _STAGE_ALIASES.get(str(key).lower())
            if stage is None:
                raise PromptRenderError(f"unknown stage name in template file: {key!r}")
            if isinstance(value, str):
                value = {"instruction": value}
            if not isinstance(value, dict) or set(value) - {"instruction", "input"}:
                raise PromptRenderError(f"bad template entry for {key!r}")
            overrides[stage] = value

        templates = dict(_DEFAULTS)
        for stage in (Stage.DRAFT, Stage.JUDGE, Stage.EXTRACT, Stage.REFLECT, Stage.REVISE):
            if stage in overrides:
                base = templates[stage]
                templates[stage] = PromptTemplate(
                    stage,
                    overrides[stage].get("instruction", base.instruction),
                    overrides[stage].get("input", base.input),
                )
        draft = templates[Stage.DRAFT]
        back = overrides.get(Stage.BACK, {})
        templates[Stage.BACK] = PromptTemplate(
            Stage.BACK,
            back.get("instruction", draft.instruction),
            back.get("input", draft.input),
        )
        return cls(templates)


DEFAULT_PROMPTS = PromptSet(_DEFAULTS)


def _substitute(text: str, values: Mapping[str, str], stage: Stage) -> str:
    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise PromptRenderError(f"unbound placeholder {{{name}}} in {stage.value} template")
        return values[name]

    return _PLACEHOLDER_RE.sub(repl, text)


def render(
    stage: Stage,
    values: Mapping[str, str | None],
    prompts: PromptSet | None = None,
    allow_empty: frozenset[str] = frozenset(),
) -> MessageSequence:
    """Render one stage template.

    A value that is None, or blank when not listed in ``allow_empty``, counts as
    unbound.
    """
    tpl = (prompts or DEFAULT_PROMPTS)[stage]
    bound: dict[str, str] = {}
    for name, value in values.items():
        if value is None:
            continue
        if not value.strip() and name not in allow_empty:
            continue
        bound[name] = value
    return (
        Message("system", _substitute(tpl.instruction, bound, stage)),
        Message("user", _substitute(tpl.input, bound, stage)),
    )


def render_draft(x: str, source_lang: str, target_lang: str, prompts: PromptSet | None = None) -> MessageSequence:
    return render(Stage.DRAFT, {"x": x, "source_lang": source_lang, "target_lang": target_lang}, prompts)


def render_back(y: str, target_lang: str, source_lang: str, prompts: PromptSet | None = None) -> MessageSequence:
    # The draft text is the input here, translated from the target language back.
    return render(Stage.BACK, {"x": y, "source_lang": target_lang, "target_lang": source_lang}, prompts)


def render_judgment(x: str, x_prime: str, source_lang: str, prompts: PromptSet | None = None) -> MessageSequence:
    return render(Stage.JUDGE, {"x": x, "x_prime": x_prime, "source_lang": source_lang}, prompts)


def render_extraction(y: str, prompts: PromptSet | None = None) -> MessageSequence:
    return render(Stage.EXTRACT, {"y": y}, prompts)


def render_reflection(x_prime: str, x: str, prompts: PromptSet | None = None) -> MessageSequence:
    return render(Stage.REFLECT, {"x_prime": x_prime, "x": x}, prompts)


def render_revision(
    analysis: str,
    suggestions: str,
    x: str,
    source_lang: str,
    target_lang: str,
    prompts: PromptSet | None = None,
) -> MessageSequence:
    return render(
        Stage.REVISE,
        {"AR": analysis, "TS": suggestions, "x": x, "source_lang": source_lang, "target_lang": target_lang},
        prompts,
        allow_empty=frozenset({"AR", "TS"}),
    )
