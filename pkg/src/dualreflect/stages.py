from __future__ import annotations

import enum


class Stage(str, enum.Enum):
    """Pipeline stages. The value is the label written to transcripts."""

    DRAFT = "draft"
    BACK = "back"
    JUDGE = "judge"
    REFLECT = "reflect"
    REVISE = "revise"
    EXTRACT = "extract"

    @property
    def letter(self) -> str:
        return _LETTERS[self]


_LETTERS = {
    Stage.DRAFT: "D",
    Stage.BACK: "B",
    Stage.JUDGE: "J",
    Stage.REFLECT: "R",
    Stage.REVISE: "V",
    Stage.EXTRACT: "E",
}
