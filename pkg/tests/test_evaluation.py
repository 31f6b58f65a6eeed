import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsml.evaluation import (
    dice,
    dice_from_jaccard,
    jaccard,
    jaccard_from_dice,
    overlap,
    report,
    write_report_csv,
    write_scores_csv,
    write_trace_csv,
)
from lsml.grid import DimensionError


def _pair():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, :2, :4] = True
    b[0, 1:3, :4] = True
    return a, b


def test_metric_examples():
    a, b = _pair()
    assert (a.sum(), b.sum(), (a & b).sum()) == (8, 8, 4)
    assert jaccard(a, b) == pytest.approx(4 / 12, abs=1e-15)
    assert dice(a, b) == pytest.approx(0.5, abs=1e-15)
    assert jaccard(a, a) == 1 and dice(a, a) == 1
    c = np.zeros_like(a)
    c[3, 3, 3] = True
    assert jaccard(a, c) == 0 and dice(a, c) == 0


def test_both_empty_flagged():
    e = np.zeros((2, 2, 2), bool)
    o = overlap(e, e)
    assert o.jaccard == 1 and o.dice == 1 and o.degenerate
    assert not overlap(*_pair()).degenerate


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        jaccard(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))


@pytest.mark.parametrize("j, s", [(0.7185, 0.8362), (0.4790, 0.6477), (0.6300, 0.7730)])
def test_reference_dice_pairs(j, s):
    assert abs(dice_from_jaccard(j) - s) <= 5e-4
    assert abs(jaccard_from_dice(s) - j) <= 5e-4


def test_conversion_endpoints_and_range():
    assert dice_from_jaccard(0) == 0 and dice_from_jaccard(1) == 1
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            dice_from_jaccard(bad)
        with pytest.raises(ValueError):
            jaccard_from_dice(bad)


@settings(max_examples=60)
@given(seed=st.integers(0, 2**32 - 1), shift=st.tuples(*(st.integers(-2, 2),) * 3))
def test_identity_symmetry_translation(seed, shift):
    rng = np.random.default_rng(seed)
    a = np.zeros((10, 10, 10), bool)
    b = np.zeros((10, 10, 10), bool)
    a[2:8, 2:8, 2:8] = rng.random((6, 6, 6)) > 0.5
    b[2:8, 2:8, 2:8] = rng.random((6, 6, 6)) > 0.4
    j = jaccard(a, b)
    assert dice(a, b) == dice_from_jaccard(j)
    inter, tot = (a & b).sum(), a.sum() + b.sum()
    if tot:
        assert dice(a, b) == pytest.approx(2 * inter / tot, abs=1e-15)
    assert jaccard(b, a) == j and dice(b, a) == dice(a, b)
    ra, rb = (np.roll(m, shift, axis=(0, 1, 2)) for m in (a, b))
    assert jaccard(ra, rb) == j


def test_report_examples():
    s = report([("a", 0.5, "x")])
    assert s.mean == 0.5 and s.std == 0 and s.n == 1
    s = report([("a", 0.0, "x"), ("b", 1.0, "y")])
    assert s.mean == 0.5 and s.std == pytest.approx(np.sqrt(0.5))
    assert s.categories["x"]["n"] == 1 and s.categories["x"]["std"] == 0
    s = report([("a", 0.2, "x"), ("b", 0.4, "x"), ("c", 0.9, "x"), ("d", 1.0, "x", True)])
    assert s.n == 3 and s.n_degenerate == 1
    assert s.median == pytest.approx(0.4) and s.q1 == pytest.approx(0.3) and s.q3 == pytest.approx(0.65)
    with pytest.raises(ValueError):
        report([])


def test_csv_writers(tmp_path):
    write_scores_csv(tmp_path / "s.csv", [("e1", "wall", 0.5, 2 / 3)])
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["id", "category", "jaccard", "dice"]
    assert rows[1][:2] == ["e1", "wall"] and float(rows[1][3]) == 2 / 3
    write_trace_csv(tmp_path / "t.csv", [0.1, 0.25])
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows == [["iter", "mean_jaccard"], ["0", "0.1"], ["1", "0.25"]]
    write_report_csv(tmp_path / "r.csv", report([("a", 0.0, "x"), ("b", 1.0, "y")]))
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert [r[0] for r in rows] == ["group", "all", "x", "y"]
