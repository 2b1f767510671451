import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mamkit.labels import Annotation
from mamkit.metrics import (
    AggregationError,
    Cell,
    MetricsReport,
    PredictionRecord,
    aggregate,
    average_trials,
    image_flags,
    read_predictions,
    tp_spread,
    write_predictions,
)

NAMES = ("Smooth", "EyeEnlarge", "FaceLift", "Whiten")


def pr(y, yh, i=0):
    return PredictionRecord(i, Annotation(*yh), Annotation(*y))


def brute_force(pairs):
    """Naive per-definition evaluation over (truth, prediction) level tuples."""

    def frac(num, den):
        return Fraction(num, den) if den else None

    out = {}
    for k, name in enumerate(NAMES):
        tp_num = tp_den = tn_num = tn_den = ac_num = 0
        for y, yh in pairs:
            if y[k] != 0:
                tp_den += 1
                if yh[k] != 0:
                    tp_num += 1
            else:
                tn_den += 1
                if yh[k] == 0:
                    tn_num += 1
            if y[k] == yh[k]:
                ac_num += 1
        out[(name, "tp")] = frac(tp_num, tp_den)
        out[(name, "tn")] = frac(tn_num, tn_den)
        out[(name, "ac")] = frac(ac_num, len(pairs))
    tp_num = tp_den = tn_num = tn_den = ac_num = 0
    for y, yh in pairs:
        if any(v != 0 for v in y):
            tp_den += 1
            if all(yh[k] != 0 for k in range(4) if y[k] != 0):
                tp_num += 1
        if any(v == 0 for v in y):
            tn_den += 1
            if all(yh[k] == 0 for k in range(4) if y[k] == 0):
                tn_num += 1
        if tuple(y) == tuple(yh):
            ac_num += 1
    out[("sum", "tp")] = frac(tp_num, tp_den)
    out[("sum", "tn")] = frac(tn_num, tn_den)
    out[("sum", "ac")] = frac(ac_num, len(pairs))
    return out


EXAMPLE = [
    ((0, 2, 0, 3), (0, 1, 0, 3)),
    ((1, 0, 0, 0), (0, 0, 0, 0)),
    ((0, 0, 0, 0), (0, 0, 1, 0)),
]


class TestImageFlags:
    def test_worked_example(self):
        f = image_flags(Annotation(0, 2, 0, 3), Annotation(0, 1, 0, 3))
        assert (f.tp, f.tn, f.ac) == (True, True, False)

    @given(st.tuples(*[st.integers(0, 3)] * 4))
    def test_exact_match_sets_all_defined(self, y):
        f = image_flags(Annotation(*y), Annotation(*y))
        assert f.ac and f.tp in (True, None) and f.tn in (True, None)

    def test_all_zero_truth(self):
        f = image_flags(Annotation(), Annotation(1, 0, 0, 0))
        assert f.tp is None and f.tn is False

    def test_all_on_truth(self):
        assert image_flags(Annotation(1, 1, 1, 1), Annotation(1, 1, 1, 1)).tn is None

    @given(st.tuples(*[st.integers(0, 3)] * 4), st.tuples(*[st.integers(0, 3)] * 4))
    def test_ac_implies_tp_and_tn(self, y, yh):
        f = image_flags(Annotation(*y), Annotation(*yh))
        if f.ac:
            assert f.tp is not False and f.tn is not False


class TestAggregate:
    def test_hand_example(self):
        rep = aggregate(pr(y, yh, i) for i, (y, yh) in enumerate(EXAMPLE))
        assert rep["sum", "tp"] == Fraction(1, 2)
        assert rep["sum", "tn"] == Fraction(2, 3)
        assert rep["sum", "ac"] == 0
        assert rep["Smooth", "tp"] == 0
        assert rep["EyeEnlarge", "tp"] == 1
        assert rep["FaceLift", "tn"] == Fraction(2, 3)
        assert rep["Whiten", "ac"] == 1
        assert rep["FaceLift", "tp"] is None  # no image has face lifting on
        assert rep.cell("sum", "tp").denominator == 2

    def test_perfect_predictions(self):
        rep = aggregate(pr(y, y) for y, _ in EXAMPLE)
        assert all(c.value in (None, 1) for c in rep.cells.values())

    def test_matches_brute_force_on_random_sets(self):
        rnd = random.Random(17)
        for _ in range(1000):
            n = rnd.randint(1, 64)
            pairs = [
                (tuple(rnd.randint(0, 3) for _ in range(4)), tuple(rnd.randint(0, 3) for _ in range(4)))
                for _ in range(n)
            ]
            rep = aggregate(pr(y, yh) for y, yh in pairs)
            expected = brute_force(pairs)
            assert {k: c.value for k, c in rep.cells.items()} == expected

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.tuples(*[st.integers(0, 3)] * 4), st.tuples(*[st.integers(0, 3)] * 4)),
                    min_size=1, max_size=30), st.randoms())
    def test_permutation_invariant_and_bounded(self, pairs, rnd):
        rep = aggregate(pr(y, yh) for y, yh in pairs)
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        assert aggregate(pr(y, yh) for y, yh in shuffled) == rep
        for c in rep.cells.values():
            if c.defined:
                assert 0 <= c.value <= 1 and c.value * c.denominator <= c.denominator
            else:
                assert c.denominator == 0

    def test_empty(self):
        with pytest.raises(AggregationError):
            aggregate([])


def _report_with(tp_sum):
    base = aggregate(pr(y, yh) for y, yh in EXAMPLE)
    cells = dict(base.cells)
    cells[("sum", "tp")] = Cell(Fraction(tp_sum), 10)
    return MetricsReport(cells)


class TestAverageTrials:
    def test_identical(self):
        rep = aggregate(pr(y, yh) for y, yh in EXAMPLE)
        avg = average_trials([rep] * 5)
        assert {k: c.value for k, c in avg.cells.items()} == {k: c.value for k, c in rep.cells.items()}

    def test_mean(self):
        reps = [_report_with(v) for v in ("0.2", "0.3", "0.4", "0.5", "0.6")]
        assert average_trials(reps)["sum", "tp"] == Fraction(2, 5)
        assert tp_spread(reps) == pytest.approx(0.4)

    def test_undefined_stays_undefined(self):
        rep = aggregate(pr(y, yh) for y, yh in EXAMPLE)
        assert average_trials([rep] * 5)["FaceLift", "tp"] is None

    def test_mismatched_cells(self):
        a = aggregate(pr(y, yh) for y, yh in EXAMPLE)
        b = aggregate([pr((1, 1, 1, 1), (1, 1, 1, 1))])
        with pytest.raises(AggregationError):
            average_trials([a, a, a, a, b])

    def test_requires_five_by_default(self):
        rep = aggregate(pr(y, yh) for y, yh in EXAMPLE)
        with pytest.raises(AggregationError):
            average_trials([rep] * 4)


def test_prediction_file_round_trip(tmp_path):
    records = [pr(y, yh, i) for i, (y, yh) in enumerate(EXAMPLE)]
    path = tmp_path / "p.jsonl"
    write_predictions(path, records)
    assert json.loads(path.read_text().splitlines()[0]) == {"id": 0, "pred": [0, 1, 0, 3], "truth": [0, 2, 0, 3]}
    assert read_predictions(path) == records


def test_report_json_round_trip():
    rep = aggregate(pr(y, yh) for y, yh in EXAMPLE)
    doc = rep.to_json()
    assert set(doc) == {*NAMES, "sum"}
    assert doc["sum"] == {"tp": 0.5, "tp_den": 2, "tn": 2 / 3, "tn_den": 3, "ac": 0.0, "ac_den": 3}
    again = MetricsReport.from_json(doc)
    assert again["sum", "tp"] == Fraction(1, 2)
