"""Similarity metric, disparity/improvement signals, correlation and export.

The built-in metric is sentence-level chrF: character n-grams of order 1..6
with whitespace removed, precision and recall averaged over the orders both
sides can form, combined as an F-score with beta=2, reported on a 0..100
scale. No case or punctuation normalisation is applied.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import DegenerateSample, ExportError, MetricMismatch

CHRF_ORDER = 6
CHRF_BETA = 2.0

_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    metric_id: str = "chrf"

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 100.0:
            raise ValueError(f"score {self.value} outside [0, 100]")


@dataclass(frozen=True)
class DisparityRecord:
    task_id: str
    delta_d: float
    delta_c: float
    iteration_observed: int = 0


def _char_ngrams(text: str, n: int) -> Counter:
    return Counter(text[i:i + n] for i in range(len(text) - n + 1))


def chrf_statistics(hypothesis: str, reference: str, order: int = CHRF_ORDER) -> list[tuple[int, int, int]]:
    """Per-order (hypothesis n-grams, reference n-grams, matched n-grams)."""
    hyp = _WHITESPACE.sub("", hypothesis)
    ref = _WHITESPACE.sub("", reference)
    stats = []
    for n in range(1, order + 1):
        h = _char_ngrams(hyp, n)
        r = _char_ngrams(ref, n)
        stats.append((sum(h.values()), sum(r.values()), sum((h & r).values())))
    return stats


def chrf_from_statistics(stats: Sequence[tuple[int, int, int]], beta: float = CHRF_BETA) -> float:
    precision = recall = 0.0
    effective = 0
    for hyp_total, ref_total, matched in stats:
        if hyp_total and ref_total:
            precision += matched / hyp_total
            recall += matched / ref_total
            effective += 1
    if effective == 0:
        return 0.0
    precision /= effective
    recall /= effective
    if precision + recall == 0.0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * precision * recall / (b2 * precision + recall)


def chrf(hypothesis: str, reference: str, order: int = CHRF_ORDER, beta: float = CHRF_BETA) -> SimilarityScore:
    if not reference:
        raise ValueError("chrf needs a non-empty reference")
    if _WHITESPACE.sub("", hypothesis) == _WHITESPACE.sub("", reference):
        # Identical after whitespace removal; also covers whitespace-only pairs.
        return SimilarityScore(100.0, "chrf")
    value = chrf_from_statistics(chrf_statistics(hypothesis, reference, order), beta)
    return SimilarityScore(min(100.0, max(0.0, value)), "chrf")


Metric = Callable[[str, str], SimilarityScore]

METRICS: dict[str, Metric] = {"chrf": chrf}


def delta_d(x: str, x_prime: str, metric: Metric = chrf) -> float:
    """Disparity between a source and its back-translation: 100 - sim(x', x)."""
    if not x:
        raise ValueError("source text must be non-empty")
    return 100.0 - metric(x_prime, x).value


def delta_c(ours: SimilarityScore, baseline: SimilarityScore) -> float:
    if ours.metric_id != baseline.metric_id:
        raise MetricMismatch(f"cannot compare {ours.metric_id!r} with {baseline.metric_id!r}")
    return ours.value - baseline.value


def pearson(records: Iterable[DisparityRecord]) -> float:
    """Sample Pearson correlation between delta_d and delta_c."""
    records = list(records)
    if len(records) < 2:
        raise DegenerateSample(f"need at least 2 records, got {len(records)}")
    xs = [r.delta_d for r in records]
    ys = [r.delta_c for r in records]
    return pearson_xy(xs, ys)


def pearson_xy(xs: Sequence[float], ys: Sequence[float]) -> float:
    n = len(xs)
    if n != len(ys):
        raise ValueError("coordinate sequences differ in length")
    if n < 2:
        raise DegenerateSample(f"need at least 2 points, got {n}")
    if len(set(xs)) == 1 or len(set(ys)) == 1:
        raise DegenerateSample("zero variance in one coordinate")
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateSample("zero variance in one coordinate")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# Export for external scorers (COMET, BLEURT): one segment per line.

_LINE_BREAKS = re.compile("[\n\r\v\f\x1c\x1d\x1e\x85\u2028\u2029]+")


def _one_line(text: str) -> str:
    return _LINE_BREAKS.sub(" ", text)


@dataclass(frozen=True)
class ExportedFiles:
    source: Path
    hypothesis: Path
    reference: Path | None
    manifest: Path


def export_for_external_scoring(
    batch: Sequence[tuple[object, str]],
    out_dir: str | Path,
    run_id: str,
    include_reference: bool | None = None,
) -> ExportedFiles:
    """Write aligned source/hypothesis/reference files plus a manifest.

    ``batch`` holds (task, final_translation) pairs; tasks need ``id``,
    ``source_text``, ``source_lang``, ``target_lang`` and ``reference``.
    ``include_reference=None`` writes references when any task has one, in
    which case every task must have one. Line breaks inside a segment are
    replaced by a space and listed in the manifest.
    """
    if not batch:
        raise ExportError("nothing to export")
    pairs = {(t.source_lang, t.target_lang) for t, _ in batch}
    if len(pairs) > 1:
        raise ExportError(f"mixed language pairs in one export: {sorted(pairs)}")
    if include_reference is None:
        include_reference = any(t.reference for t, _ in batch)
    if include_reference:
        missing = [t.id for t, _ in batch if not t.reference]
        if missing:
            raise ExportError(f"reference requested but missing for task {missing[0]!r}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = ExportedFiles(
        source=out / f"{run_id}.src.txt",
        hypothesis=out / f"{run_id}.hyp.txt",
        reference=out / f"{run_id}.ref.txt" if include_reference else None,
        manifest=out / f"{run_id}.manifest.json",
    )
    columns = {"source": [], "hypothesis": [], "reference": []}
    lines, normalized = [], []
    for i, (task, hyp) in enumerate(batch, start=1):
        row = {"source": task.source_text, "hypothesis": hyp, "reference": task.reference or ""}
        for key, text in row.items():
            flat = _one_line(text)
            if flat != text and (key != "reference" or include_reference):
                normalized.append({"line": i, "field": key})
            columns[key].append(flat)
        lines.append({"line": i, "task_id": task.id})

    def write(path: Path, items: list[str]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(item + "\n" for item in items)

    write(paths.source, columns["source"])
    write(paths.hypothesis, columns["hypothesis"])
    if paths.reference is not None:
        write(paths.reference, columns["reference"])
    (source_lang, target_lang), = pairs
    manifest = {
        "run_id": run_id,
        "source_lang": source_lang,
        "target_lang": target_lang,
        "count": len(lines),
        "files": {
            "source": paths.source.name,
            "hypothesis": paths.hypothesis.name,
            "reference": paths.reference.name if paths.reference else None,
        },
        "lines": lines,
        "normalized": normalized,
    }
    paths.manifest.write_text(json.dumps(manifest, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return paths


def read_segments(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        return [line[:-1] if line.endswith("\n") else line for line in fh]
