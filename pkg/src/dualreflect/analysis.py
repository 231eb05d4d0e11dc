"""Feedback-effectiveness analysis over finished run directories.

Pairs a dual-reflection run with a zero-shot run over the same corpus and
computes, per task, the disparity of the first back-translation (delta D) and
the score gain over the baseline (delta C), their Pearson correlation, and a
per-iteration score curve when the dual run extracted a translation after
every iteration. Never calls a backend.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import AnalysisError, DegenerateSample
from .metrics import DisparityRecord, chrf, delta_c, delta_d, pearson
from .stages import Stage
from .transcript import TranscriptStore


@dataclass
class RunDir:
    path: Path
    manifest: dict[str, Any]
    rows: list[dict[str, Any]]

    @classmethod
    def load(cls, path: str | Path) -> "RunDir":
        path = Path(path)
        try:
            manifest = json.loads((path / "run.json").read_text(encoding="utf-8"))
            with open(path / "results.jsonl", encoding="utf-8") as fh:
                rows = [json.loads(line) for line in fh if line.strip()]
        except FileNotFoundError as exc:
            raise AnalysisError(f"{path} is not a run directory: {exc.filename} missing") from None
        return cls(path, manifest, rows)

    @property
    def store(self) -> TranscriptStore:
        return TranscriptStore(self.path / "transcripts")

    def export_task_ids(self) -> list[str]:
        export = self.manifest.get("export") or {}
        if not export.get("manifest"):
            return []
        data = json.loads((self.path / export["manifest"]).read_text(encoding="utf-8"))
        return [line["task_id"] for line in data["lines"]]


def read_scores(path: str | Path, task_ids: list[str]) -> dict[str, float]:
    """Per-segment scores: ``task_id<TAB>score`` lines, or bare scores aligned
    with ``task_ids`` (the run's export order)."""
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\r\n") for line in fh if line.strip()]
    keyed = all("\t" in line for line in lines)
    if not keyed and len(lines) != len(task_ids):
        raise AnalysisError(f"{path}: {len(lines)} scores for {len(task_ids)} exported segments")
    for i, line in enumerate(lines):
        try:
            if keyed:
                tid, _, value = line.partition("\t")
                scores[tid.strip()] = float(value)
            else:
                scores[task_ids[i]] = float(line)
        except ValueError:
            raise AnalysisError(f"{path}: line {i + 1} is not a score: {line!r}") from None
    return scores


@dataclass
class AnalysisReport:
    metric: str
    rows: list[dict[str, Any]] = field(default_factory=list)
    pearson_r: float | None = None
    pearson_note: str | None = None
    curve: list[dict[str, Any]] = field(default_factory=list)
    skipped: list[dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_text(self) -> str:
        out = [f"metric: {self.metric}", "", f"{'task':<12}{'dD':>10}{'dC':>10}{'iters':>7}"]
        for row in self.rows:
            out.append(f"{row['task_id']:<12}{row['delta_d']:>10.3f}{row['delta_c']:>10.3f}{row['iterations']:>7}")
        out.append("")
        if self.pearson_r is not None:
            out.append(f"pearson r (dD, dC) = {self.pearson_r:.6f}  (n={len(self.rows)})")
        else:
            out.append(f"pearson r unavailable: {self.pearson_note}")
        if self.curve:
            out.append("")
            out.append("per-iteration chrf (mean over tasks):")
            for point in self.curve:
                out.append(f"  iteration {point['iteration']}: {point['score']:.3f}")
        if self.skipped:
            out.append("")
            out.append(f"skipped {len(self.skipped)} task(s): " + ", ".join(s["task_id"] for s in self.skipped))
        return "\n".join(out) + "\n"


def _check_alignment(dual: RunDir, zero: RunDir) -> None:
    a = [(r["task_id"], r["source"]) for r in dual.rows]
    b = [(r["task_id"], r["source"]) for r in zero.rows]
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            raise AnalysisError(f"runs differ at corpus line {i + 1}: task {x[0]!r} vs {y[0]!r}")
    if len(a) != len(b):
        shorter, n = ("zero-shot", len(b)) if len(b) < len(a) else ("dual-reflect", len(a))
        raise AnalysisError(f"runs differ in length: {shorter} run ends after {n} tasks")


def _first_back_translation(dual: RunDir, task_id: str) -> str | None:
    for entry in dual.store.load_run(task_id).entries:
        if entry.stage is Stage.BACK:
            return entry.raw_output.strip()
    return None


def iteration_curve(dual: RunDir) -> list[dict[str, Any]]:
    """Mean chrf against the reference of the translation extracted at each
    iteration. Tasks that stopped early carry their last value forward."""
    per_task: list[dict[int, float]] = []
    for row in dual.rows:
        if row["status"] != "ok" or not row.get("reference"):
            continue
        points: dict[int, str] = {}
        for entry in dual.store.load_run(row["task_id"]).entries:
            if entry.stage is Stage.EXTRACT and entry.parsed_summary is not None:
                points[entry.iteration] = entry.parsed_summary
        if points:
            per_task.append({it: chrf(text, row["reference"]).value for it, text in points.items()})
    if not per_task:
        return []
    last = max(max(p) for p in per_task)
    first = min(min(p) for p in per_task)
    curve = []
    for it in range(max(first, 1), last + 1):
        values = []
        for points in per_task:
            seen = [k for k in points if k <= it]
            if seen:
                values.append(points[max(seen)])
        if values:
            curve.append({"iteration": it, "score": sum(values) / len(values), "tasks": len(values)})
    return curve


def analyze(
    dual_dir: str | Path,
    zero_dir: str | Path,
    *,
    metric: str = "chrf",
    score_files: list[str | Path] | None = None,
) -> AnalysisReport:
    """Build the delta D / delta C table, correlation and iteration curve.

    With ``metric="external"``, ``score_files`` holds per-segment scores for
    the dual run and the zero-shot run, plus optionally a third file scoring
    the first back-translation against the source (used for delta D in place
    of chrf).
    """
    dual, zero = RunDir.load(dual_dir), RunDir.load(zero_dir)
    if dual.manifest.get("mode") != "dual-reflect" or zero.manifest.get("mode") != "zero-shot":
        raise AnalysisError("expected a dual-reflect run directory followed by a zero-shot run directory")
    _check_alignment(dual, zero)

    disparity_scores = None
    if metric == "external":
        if not score_files or len(score_files) not in (2, 3):
            raise AnalysisError("external metric needs 2 or 3 score files: dual, zero-shot[, back-translation]")
        dual_scores = read_scores(score_files[0], dual.export_task_ids())
        zero_scores = read_scores(score_files[1], zero.export_task_ids())
        if len(score_files) == 3:
            disparity_scores = read_scores(score_files[2], dual.export_task_ids())
    elif metric != "chrf":
        raise AnalysisError(f"unknown metric {metric!r}")

    report = AnalysisReport(metric=metric)
    records = []
    for d_row, z_row in zip(dual.rows, zero.rows):
        tid = d_row["task_id"]
        if d_row["status"] != "ok" or z_row["status"] != "ok":
            report.skipped.append({"task_id": tid, "reason": f"status {d_row['status']}/{z_row['status']}"})
            continue
        if metric == "chrf":
            if not d_row.get("reference"):
                raise AnalysisError(f"missing scores: task {tid!r} has no reference for chrf")
            dc = delta_c(chrf(d_row["final_translation"], d_row["reference"]),
                         chrf(z_row["final_translation"], z_row["reference"]))
        else:
            if tid not in dual_scores or tid not in zero_scores:
                raise AnalysisError(f"missing scores for task {tid!r}")
            dc = dual_scores[tid] - zero_scores[tid]

        if disparity_scores is not None:
            if tid not in disparity_scores:
                raise AnalysisError(f"missing back-translation score for task {tid!r}")
            dd = 100.0 - disparity_scores[tid]
        else:
            back = _first_back_translation(dual, tid)
            if back is None:
                report.skipped.append({"task_id": tid, "reason": "no back-translation in transcript"})
                continue
            dd = delta_d(d_row["source"], back)
        records.append(DisparityRecord(tid, dd, dc, d_row.get("iterations_used") or 0))
        report.rows.append({"task_id": tid, "delta_d": dd, "delta_c": dc,
                            "iterations": d_row.get("iterations_used") or 0})

    try:
        report.pearson_r = pearson(records)
    except DegenerateSample as exc:
        report.pearson_note = str(exc)

    if dual.manifest.get("config", {}).get("force_extraction_each_iteration"):
        report.curve = iteration_curve(dual)
    return report


def write_report(report: AnalysisReport, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text_path, json_path = out / "analysis.txt", out / "analysis.json"
    text_path.write_text(report.to_text(), encoding="utf-8")
    json_path.write_text(json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return text_path, json_path
