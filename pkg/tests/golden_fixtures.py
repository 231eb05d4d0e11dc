"""Canonical inputs for the golden prompt files."""

from dualreflect import prompts as P

X = "我们明天去公园。"
Y = "We will go to the park tomorrow."
X_PRIME = "明天我们要去公园。"
AR = "The back-translation adds 要, which shifts the tone toward intention."
TS = "Keep the plain future statement without extra emphasis."
LS = "Chinese"
LT = "English"

RENDERS = {
    "draft": lambda: P.render_draft(X, LS, LT),
    "back": lambda: P.render_back(Y, LT, LS),
    "judge": lambda: P.render_judgment(X, X_PRIME, LS),
    "extract": lambda: P.render_extraction(Y),
    "reflect": lambda: P.render_reflection(X_PRIME, X),
    "revise": lambda: P.render_revision(AR, TS, X, LS, LT),
}


def serialize(messages) -> str:
    return "".join(f"### {m.role}\n{m.content}\n" for m in messages)
