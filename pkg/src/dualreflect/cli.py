"""Command line: ``translate``, ``batch`` and ``analyze``.

Exit codes: 0 success, 1 invalid input or usage, 2 backend failure,
3 translation printed but extraction fell back to the raw draft.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import uuid
from pathlib import Path
from typing import Any, Mapping

from .analysis import analyze, write_report
from .backend import HttpBackend, script_from_file
from .batch import BatchSpec, Mode, run_batch
from .errors import (
    AnalysisError,
    BackendFailure,
    DualReflectError,
    InvalidTask,
    PromptRenderError,
    ScriptError,
    SequenceError,
)
from .pipeline import RunConfig, TranslationTask, run_pipeline, run_zero_shot
from .prompts import PromptSet
from .transcript import TranscriptStore

EXIT_OK, EXIT_INVALID, EXIT_BACKEND, EXIT_FALLBACK = 0, 1, 2, 3

DEFAULTS: dict[str, Any] = {
    "backend": "http",
    "model": "gpt-3.5-turbo",
    "temperature": 0.0,
    "max_iterations": 3,
    "force_extraction_each_iteration": False,
    "reask_on_parse_failure": False,
    "max_output_tokens": None,
    "base_url": "https://api.openai.com/v1",
    "api_key": None,
    "timeout": 60.0,
    "max_attempts": 5,
    "concurrency": 4,
    "metric": "chrf",
}

ENV_VARS = {
    "DR_API_KEY": ("api_key", str),
    "DR_BASE_URL": ("base_url", str),
    "DR_TIMEOUT": ("timeout", float),
    "DR_MAX_ATTEMPTS": ("max_attempts", int),
    "DR_MODEL": ("model", str),
}

logger = logging.getLogger("dualreflect")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--from", dest="source_lang", required=True, help="source language name")
    p.add_argument("--to", dest="target_lang", required=True, help="target language name")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.DUAL_REFLECT.value)
    p.add_argument("--backend", choices=["http", "scripted"], default=None)
    p.add_argument("--script", help="rule file for the scripted backend")
    p.add_argument("--model", default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-iterations", dest="max_iterations", type=int, default=None)
    p.add_argument("--max-output-tokens", dest="max_output_tokens", type=int, default=None)
    p.add_argument("--force-extract-each-iter", dest="force_extraction_each_iteration",
                   action="store_true", default=None)
    p.add_argument("--reask", dest="reask_on_parse_failure", action="store_true", default=None,
                   help="repeat an unparseable extraction once before falling back")
    p.add_argument("--metric", choices=["chrf", "external"], default=None)
    p.add_argument("--transcript-dir", dest="transcript_dir")
    p.add_argument("--templates", help="JSON file overriding prompt templates")
    p.add_argument("--config", help="JSON config file (flags > env > file > defaults)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualreflect", description="Dual-reflection machine translation runner")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("translate", help="translate one text")
    _run_options(t)
    t.add_argument("--text", help="source text (default: read stdin)")
    t.add_argument("--run-id", dest="run_id")
    t.add_argument("--resume", action="store_true",
                   help="continue the transcript RUN_ID in --transcript-dir instead of starting over")

    b = sub.add_parser("batch", help="translate a corpus file")
    _run_options(b)
    b.add_argument("--input", required=True, help="corpus: one segment per line, optional TAB reference")
    b.add_argument("--out", required=True, help="run directory to create")
    b.add_argument("--concurrency", type=int, default=None)
    b.add_argument("--overwrite", action="store_true")
    b.add_argument("--resume", action="store_true", help="continue an interrupted run in --out")

    a = sub.add_parser("analyze", help="delta D / delta C report over two run directories")
    a.add_argument("dual_dir", help="dual-reflect run directory")
    a.add_argument("zero_dir", help="zero-shot run directory")
    a.add_argument("--metric", choices=["chrf", "external"], default="chrf")
    a.add_argument("--scores", nargs="+", default=None,
                   help="external per-segment scores: DUAL ZERO [BACKTRANSLATION]")
    a.add_argument("--out", default="analysis")
    a.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def resolve_settings(args: argparse.Namespace, env: Mapping[str, str]) -> dict[str, Any]:
    """Merge defaults, config file, environment and flags, later winning."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        unknown = set(data) - set(DEFAULTS) - {"script"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        settings.update(data)
    for var, (key, cast) in ENV_VARS.items():
        if env.get(var):
            try:
                settings[key] = cast(env[var])
            except ValueError:
                raise UsageError(f"bad value for {var}: {env[var]!r}") from None
    for key in ("backend", "script", "model", "temperature", "max_iterations", "max_output_tokens",
                "force_extraction_each_iteration", "reask_on_parse_failure", "metric", "concurrency"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def run_config(settings: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig(
            backend_id=settings["backend"],
            model=settings["model"],
            temperature=float(settings["temperature"]),
            max_iterations=int(settings["max_iterations"]),
            force_extraction_each_iteration=bool(settings["force_extraction_each_iteration"]),
            metric=settings["metric"],
            max_output_tokens=settings["max_output_tokens"],
            reask_on_parse_failure=bool(settings["reask_on_parse_failure"]),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def build_backend(settings: Mapping[str, Any]):
    if settings["backend"] == "scripted":
        if not settings.get("script"):
            raise UsageError("--backend scripted needs --script")
        try:
            return script_from_file(settings["script"])
        except OSError as exc:
            raise UsageError(f"cannot read script: {exc}") from None
    return HttpBackend(
        settings["base_url"],
        settings.get("api_key"),
        timeout=float(settings["timeout"]),
        max_attempts=int(settings["max_attempts"]),
        max_concurrency=int(settings["concurrency"]),
    )


def public_settings(settings: Mapping[str, Any]) -> dict[str, Any]:
    return {k: ("***" if k == "api_key" and v else v) for k, v in settings.items()}


def _prompts(args) -> PromptSet | None:
    if not args.templates:
        return None
    try:
        return PromptSet.from_file(args.templates)
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad template file: {exc}") from None


def cmd_translate(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    settings = resolve_settings(args, env)
    config = run_config(settings)
    prompts = _prompts(args)
    if args.resume and not (args.run_id and args.transcript_dir):
        raise UsageError("--resume needs --run-id and --transcript-dir")
    text = args.text if args.text is not None else sys.stdin.read()
    run_id = args.run_id or f"run-{uuid.uuid4().hex[:12]}"
    task = TranslationTask(id=run_id, source_text=text.strip("\n"), source_lang=args.source_lang,
                           target_lang=args.target_lang)
    task.validate()
    backend = build_backend(settings)
    sink = None
    recorded = ()
    if args.transcript_dir:
        store = TranscriptStore(args.transcript_dir)
        try:
            existing = store.path_for(run_id).exists()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if existing and not args.resume:
            raise UsageError(f"transcript for run {run_id!r} exists; pass --resume to continue it")
        if existing:
            recorded = store.load_run(run_id).entries
        sink = store.writer(run_id)
        print(f"transcript: {store.path_for(run_id)}", file=sys.stderr)
    runner = run_zero_shot if args.mode == Mode.ZERO_SHOT.value else run_pipeline
    try:
        result = runner(task, config, backend, sink=sink, prompts=prompts, run_id=run_id, resume_from=recorded)
    except BackendFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    print(result.final_translation)
    logger.info("%s after %d iteration(s)", result.termination_reason.value, result.iterations_used)
    if result.fallback_used:
        print("warning: extraction failed; printed the last draft verbatim", file=sys.stderr)
        return EXIT_FALLBACK
    return EXIT_OK


def cmd_batch(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    settings = resolve_settings(args, env)
    config = run_config(settings)
    prompts = _prompts(args)
    if not Path(args.input).is_file():
        raise UsageError(f"corpus file not found: {args.input}")
    try:
        spec = BatchSpec(
            input_path=Path(args.input),
            source_lang=args.source_lang,
            target_lang=args.target_lang,
            out_dir=Path(args.out),
            mode=Mode(args.mode),
            config=config,
            concurrency=int(settings["concurrency"]),
            overwrite=args.overwrite,
            resume=args.resume,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    backend = build_backend(settings)

    def progress(done: int, total: int) -> None:
        print(f"\r{done}/{total}", end="", file=sys.stderr, flush=True)

    interactive = sys.stderr.isatty()
    try:
        report = run_batch(spec, backend, prompts, settings=public_settings(settings),
                           progress=progress if interactive else None)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    if interactive:
        print(file=sys.stderr)
    counts: dict[str, int] = {}
    for o in report.outcomes:
        counts[o.status] = counts.get(o.status, 0) + 1
    print(" ".join(f"{k}={v}" for k, v in sorted(counts.items())) + f"  ->  {report.out_dir}")
    return report.exit_code()


def cmd_analyze(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    report = analyze(args.dual_dir, args.zero_dir, metric=args.metric, score_files=args.scores)
    sys.stdout.write(report.to_text())
    text_path, json_path = write_report(report, args.out)
    print(f"written: {text_path} {json_path}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"translate": cmd_translate, "batch": cmd_batch, "analyze": cmd_analyze}


def main(argv: list[str] | None = None, env: Mapping[str, str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    env = os.environ if env is None else env
    try:
        return COMMANDS[args.command](args, env)
    except (UsageError, InvalidTask, ScriptError, PromptRenderError, AnalysisError, SequenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DualReflectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
