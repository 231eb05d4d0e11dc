import json
import random

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dualreflect.errors import DegenerateSample, ExportError, MetricMismatch
from dualreflect.metrics import (
    DisparityRecord,
    SimilarityScore,
    chrf,
    delta_c,
    delta_d,
    export_for_external_scoring,
    pearson,
    pearson_xy,
    read_segments,
)
from dualreflect.pipeline import TranslationTask

from .oracles import chrf_oracle, pearson_oracle


def test_chrf_golden_value():
    assert chrf("cat", "cab").value == pytest.approx(700 / 18, abs=1e-12)
    assert chrf("cat", "cab").value == pytest.approx(chrf_oracle("cat", "cab"), abs=1e-12)


@pytest.mark.parametrize("hyp,ref,expected", [
    ("abc", "abc", 100.0),
    ("a b c", "abc", 100.0),
    (" ", "\t", 100.0),
    ("xyz", "abc", 0.0),
    ("", "abc", 0.0),
    ("a", "abcdefgh", None),
])
def test_chrf_edges(hyp, ref, expected):
    value = chrf(hyp, ref).value
    if expected is None:
        expected = chrf_oracle(hyp, ref)
    assert value == pytest.approx(expected, abs=1e-12)


def test_chrf_empty_reference_rejected():
    with pytest.raises(ValueError):
        chrf("abc", "")


def test_chrf_matches_oracle_on_random_pairs():
    rng = random.Random(7)
    alphabet = "abcde fg我们去公园。"
    for _ in range(200):
        ref = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 25)))
        hyp = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 25)))
        if not ref.strip():
            ref += "a"
        assert abs(chrf(hyp, ref).value - chrf_oracle(hyp, ref)) <= 1e-9


@given(st.text(min_size=1, max_size=40), st.text(max_size=40))
@settings(max_examples=200, deadline=None)
def test_chrf_range_property(ref, hyp):
    value = chrf(hyp, ref).value
    assert 0.0 <= value <= 100.0


def test_similarity_score_bounds():
    with pytest.raises(ValueError):
        SimilarityScore(100.0001)
    with pytest.raises(ValueError):
        SimilarityScore(-1)


@given(st.text(min_size=1, max_size=60))
def test_delta_d_identity_is_exact_zero(x):
    assert delta_d(x, x) == 0.0


def test_delta_d_is_complement():
    assert delta_d("cab", "cat") == 100.0 - chrf("cat", "cab").value
    with pytest.raises(ValueError):
        delta_d("", "x")


def test_delta_c_example():
    assert delta_c(SimilarityScore(90.2, "comet"), SimilarityScore(88.0, "comet")) == pytest.approx(2.2)


def test_delta_c_metric_mismatch():
    with pytest.raises(MetricMismatch):
        delta_c(SimilarityScore(90.0, "comet"), SimilarityScore(80.0, "chrf"))


def test_pearson_matches_oracle():
    rng = random.Random(11)
    for _ in range(50):
        n = rng.randint(3, 40)
        xs = [rng.uniform(0, 100) for _ in range(n)]
        ys = [rng.uniform(-10, 10) for _ in range(n)]
        assert abs(pearson_xy(xs, ys) - pearson_oracle(xs, ys)) <= 1e-9


def test_pearson_linear_data():
    xs = [1.0, 2.0, 3.0, 7.5]
    assert pearson_xy(xs, [2 * x + 1 for x in xs]) == 1.0
    assert pearson_xy(xs, [-3 * x for x in xs]) == -1.0


def test_pearson_records():
    records = [DisparityRecord(f"t{i}", d, c) for i, (d, c) in enumerate([(10, 1), (20, 2), (30, 2.5)])]
    assert pearson(records) == pytest.approx(pearson_oracle([10, 20, 30], [1, 2, 2.5]), abs=1e-12)


@pytest.mark.parametrize("xs,ys", [([1.0], [2.0]), ([], []), ([1, 1, 1], [1, 2, 3]), ([1, 2, 3], [5, 5, 5])])
def test_pearson_degenerate(xs, ys):
    with pytest.raises(DegenerateSample):
        pearson_xy(xs, ys)


def test_pearson_constant_with_inexact_mean():
    xs = [0.0, 0.0, 1.0]
    ys = [683.4858646419168] * 3
    with pytest.raises(DegenerateSample):
        pearson_xy(xs, ys)


finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)


@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=30),
       st.floats(min_value=0.1, max_value=10), finite,
       st.floats(min_value=0.1, max_value=10), finite)
@settings(max_examples=200, deadline=None)
def test_pearson_affine_invariance(points, a, b, c, d):
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    assume(min(max(xs) - min(xs), max(ys) - min(ys)) >= 1e-3)
    r = pearson_xy(xs, ys)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(pearson_oracle(xs, ys), abs=1e-9)
    xs2 = [a * x + b for x in xs]
    ys2 = [c * y + d for y in ys]
    assert pearson_xy(xs2, ys2) == pytest.approx(r, abs=1e-6)


def _tasks(refs=("Hi.", "Bye.")):
    return [
        (TranslationTask(f"seg{i:05d}", f"src {i}", "Czech", "Ukrainian", reference=ref), f"hyp {i}")
        for i, ref in enumerate(refs, 1)
    ]


def test_export_three_files_aligned(tmp_path):
    files = export_for_external_scoring(_tasks(), tmp_path, "r1")
    assert [read_segments(p) for p in (files.source, files.hypothesis, files.reference)] == [
        ["src 1", "src 2"], ["hyp 1", "hyp 2"], ["Hi.", "Bye."]
    ]
    manifest = json.loads(files.manifest.read_text())
    assert [line["task_id"] for line in manifest["lines"]] == ["seg00001", "seg00002"]
    assert manifest["source_lang"] == "Czech" and manifest["normalized"] == []


def test_export_without_references(tmp_path):
    files = export_for_external_scoring(_tasks((None, None)), tmp_path, "r1")
    assert files.reference is None
    assert not (tmp_path / "r1.ref.txt").exists()


def test_export_missing_reference_is_error(tmp_path):
    with pytest.raises(ExportError, match="seg00002"):
        export_for_external_scoring(_tasks(("Hi.", None)), tmp_path, "r1")
    with pytest.raises(ExportError):
        export_for_external_scoring(_tasks((None, None)), tmp_path, "r2", include_reference=True)


def test_export_mixed_pairs_rejected(tmp_path):
    batch = _tasks()
    batch.append((TranslationTask("x", "s", "German", "English"), "h"))
    with pytest.raises(ExportError, match="mixed"):
        export_for_external_scoring(batch, tmp_path, "r1")


def test_export_empty_rejected(tmp_path):
    with pytest.raises(ExportError):
        export_for_external_scoring([], tmp_path, "r1")


def test_export_line_breaks_normalized(tmp_path):
    batch = [(TranslationTask("a", "one\ntwo", "Czech", "Ukrainian"), "x y\r\nz")]
    files = export_for_external_scoring(batch, tmp_path, "r1")
    assert read_segments(files.source) == ["one two"]
    assert read_segments(files.hypothesis) == ["x y z"]
    manifest = json.loads(files.manifest.read_text())
    assert manifest["normalized"] == [{"line": 1, "field": "source"}, {"line": 1, "field": "hypothesis"}]


segment = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\n\r\v\f\x1c\x1d\x1e\x85  "),
                  max_size=30)


@given(st.lists(st.tuples(segment.filter(str.strip), segment), min_size=1, max_size=8))
@settings(max_examples=50, deadline=None)
def test_export_round_trip(tmp_path_factory, rows):
    out = tmp_path_factory.mktemp("exp")
    batch = [(TranslationTask(f"t{i}", src, "A", "B"), hyp) for i, (src, hyp) in enumerate(rows)]
    files = export_for_external_scoring(batch, out, "rt")
    assert read_segments(files.source) == [r[0] for r in rows]
    assert read_segments(files.hypothesis) == [r[1] for r in rows]
