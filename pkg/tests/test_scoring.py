import json
import math

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from reasonloop.scoring import (
    Benchmark,
    JudgeRecord,
    Scale,
    ScoreRangeError,
    aggregate,
    imgedit_sample_score,
    kris_sample_score,
    vie_overall,
)

KRIS = ("visual_consistency", "visual_quality", "instruction_following", "knowledge_plausibility")
ten = st.floats(0, 10, allow_nan=False)
five = st.floats(1, 5, allow_nan=False)


class TestVieOverall:
    @pytest.mark.parametrize("sc, pq, expected", [(0, 10, 0.0), (10, 10, 10.0), (9, 4, 6.0)])
    def test_examples(self, sc, pq, expected):
        assert vie_overall(sc, pq) == expected

    @pytest.mark.parametrize("sc, pq", [(-0.1, 5), (5, 10.01), (math.nan, 1), (math.inf, 1)])
    def test_range(self, sc, pq):
        with pytest.raises(ScoreRangeError):
            vie_overall(sc, pq)

    @given(st.floats(0.001, 10), st.floats(0.001, 10), st.floats(0.001, 10))
    def test_strictly_increasing(self, a, b, other):
        assume(a < b and b - a > 1e-9)
        assert vie_overall(a, other) < vie_overall(b, other)
        assert vie_overall(other, a) < vie_overall(other, b)


class TestImgEdit:
    @pytest.mark.parametrize("args, expected", [((5, 5, 5), 5.0), ((2, 5, 5), 2.0), ((3, 4, 2), 8 / 3)])
    def test_examples(self, args, expected):
        assert imgedit_sample_score(*args) == pytest.approx(expected, abs=1e-12)

    def test_range(self):
        with pytest.raises(ScoreRangeError):
            imgedit_sample_score(0, 3, 3)

    @given(five, five, five)
    def test_cap_law(self, a, q, p):
        assert imgedit_sample_score(a, q, p) <= a + 1e-12


class TestKris:
    def test_corners(self):
        assert kris_sample_score(dict.fromkeys(KRIS, 5)) == 100.0
        assert kris_sample_score(dict.fromkeys(KRIS, 1)) == 0.0

    def test_mixed(self):
        assert kris_sample_score(dict(zip(KRIS, (5, 5, 1, 1)))) == 50.0

    def test_missing_dimension(self):
        with pytest.raises(ScoreRangeError, match="knowledge_plausibility"):
            kris_sample_score(dict(zip(KRIS[:3], (3, 3, 3))))

    @given(st.tuples(five, five, five, five))
    def test_in_range(self, values):
        assert 0 <= kris_sample_score(dict(zip(KRIS, values))) <= 100


class TestJudgeRecord:
    def test_scale_defaults(self):
        assert JudgeRecord(Benchmark.GEDIT, {"semantic_consistency": 9, "perceptual_quality": 4}).scale is Scale.ZERO_TO_TEN
        assert JudgeRecord("kris", dict.fromkeys(KRIS, 3)).scale is Scale.ONE_TO_FIVE

    def test_dims_within_scale(self):
        with pytest.raises(ScoreRangeError, match="adherence"):
            JudgeRecord("imgedit", {"adherence": 6, "quality": 1, "preservation": 1})

    def test_overall_derived(self):
        assert JudgeRecord("imgedit", {"adherence": 3, "quality": 4, "preservation": 2}).overall == pytest.approx(8 / 3)


class TestAggregate:
    def _gedit(self, sc, pq):
        return JudgeRecord("gedit", {"semantic_consistency": sc, "perceptual_quality": pq})

    def test_two_records(self):
        report = aggregate([self._gedit(6, 6), self._gedit(8, 8)])
        assert report["n"] == 2
        assert report["overall"]["mean"] == 7.0
        assert report["overall"]["stderr"] == pytest.approx(1.0)

    def test_single_record(self):
        report = aggregate([self._gedit(9, 4)])
        assert report["overall"] == {"mean": 6.0, "stderr": 0.0}

    def test_mixed(self):
        with pytest.raises(ValueError, match="mixed"):
            aggregate([self._gedit(1, 1), JudgeRecord("kris", dict.fromkeys(KRIS, 2))])

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_report_shape_and_order(self):
        report = aggregate([self._gedit(9, 4), self._gedit(4, 9)])
        assert list(report["dims"]) == ["perceptual_quality", "semantic_consistency"]
        assert set(report) == {"benchmark", "n", "dims", "overall"}
        assert json.dumps(report) == json.dumps(aggregate([self._gedit(9, 4), self._gedit(4, 9)]))

    @given(st.lists(st.tuples(ten, ten), min_size=1, max_size=20))
    def test_mean_is_bounded(self, pairs):
        report = aggregate([self._gedit(a, b) for a, b in pairs])
        overalls = [vie_overall(a, b) for a, b in pairs]
        assert min(overalls) - 1e-9 <= report["overall"]["mean"] <= max(overalls) + 1e-9
        assert report["overall"]["stderr"] >= 0
