import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import filter_oracle, prune_oracle, top_oracle
from synthcomp.filtering import (
    cosine,
    filter_backgrounds,
    kept_indices,
    max_class_similarity,
    prune_decisions,
    prune_fraction,
    select_top_foregrounds,
    write_filter_log,
)


def unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_cosine_hand_value():
    assert cosine((0.6, 0.8), (0.8, 0.6)) == pytest.approx(0.96)
    assert cosine((1, 0), (1, 0)) == 1.0
    assert cosine((1, 0), (-1, 0)) == -1.0


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        cosine((1, 0), (1, 0, 0))


def test_filter_keep_ten_of_hundred(rng):
    cands, cap, classes = unit(rng, 100, 16), unit(rng, 1, 16)[0], unit(rng, 3, 16)
    decisions = filter_backgrounds(cands, cap, classes, keep=10, reject_threshold=0.26)
    assert kept_indices(decisions) == filter_oracle(cands, cap, classes, 10, 0.26)
    assert len(decisions) == 100 and [d.index for d in decisions] == list(range(100))


def test_filter_all_rejected():
    cands = np.eye(3)
    out = filter_backgrounds(cands, np.array([1.0, 0, 0]), np.eye(3), keep=2, reject_threshold=0.5)
    assert kept_indices(out) == [] and all(d.rejected for d in out)


def test_filter_fewer_survivors_than_keep():
    cands = np.array([[1.0, 0], [0, 1.0], [0.6, 0.8]])
    out = filter_backgrounds(cands, np.array([0.0, 1.0]), np.array([[1.0, 0.0]]), keep=30, reject_threshold=0.7)
    assert kept_indices(out) == [1, 2]


def test_filter_ties_go_to_lower_index():
    cands = np.array([[1.0, 0.0]] * 5)
    out = filter_backgrounds(cands, np.array([1.0, 0.0]), np.array([[0.0, 1.0]]), keep=2)
    assert kept_indices(out) == [0, 1]


def test_filter_per_candidate_caption():
    cands = np.array([[1.0, 0.0], [0.0, 1.0]])
    caps = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = filter_backgrounds(cands, caps, np.zeros((0, 2)), keep=1)
    assert kept_indices(out) == [1]


def test_filter_weighted_mode():
    cands = np.array([[1.0, 0.0], [0.8, 0.6]])
    out = filter_backgrounds(cands, np.array([1.0, 0.0]), np.array([[1.0, 0.0]]), keep=1, mode="weighted", class_weight=1.0)
    # scores 1-1=0 and 0.8-0.8=0: tie -> lower index
    assert kept_indices(out) == [0]
    with pytest.raises(ValueError):
        filter_backgrounds(cands, np.array([1.0, 0.0]), np.eye(2), keep=1, mode="vote")


def test_top_foregrounds(rng):
    cands, label = unit(rng, 50, 8), unit(rng, 1, 8)[0]
    assert kept_indices(select_top_foregrounds(cands, label, 5)) == top_oracle(cands, label, 5)


def test_top_foregrounds_keep_above_n(rng):
    cands = unit(rng, 3, 8)
    assert sorted(kept_indices(select_top_foregrounds(cands, cands[0], 10))) == [0, 1, 2]


def test_prune_twenty_drop_two(rng):
    cands, classes = unit(rng, 20, 8), unit(rng, 4, 8)
    assert prune_fraction(cands, classes, 0.1) == prune_oracle(cands, classes, 2)


def test_prune_six_hundred():
    rng = np.random.default_rng(0)
    cands, classes = unit(rng, 600, 8), unit(rng, 2, 8)
    assert len(prune_fraction(cands, classes, 0.05)) == 570


def test_prune_zero_fraction(rng):
    cands = unit(rng, 7, 4)
    assert prune_fraction(cands, unit(rng, 1, 4), 0.0) == list(range(7))


def test_max_class_similarity_without_classes():
    assert np.all(max_class_similarity(np.eye(2), np.zeros((0, 2))) == -1.0)


# integer-valued vectors keep dot products exact so ties are real ties
small_ints = st.integers(-2, 2)


@st.composite
def candidate_sets(draw):
    d = draw(st.integers(1, 4))
    n = draw(st.integers(1, 60))
    cands = draw(arrays(np.float64, (n, d), elements=small_ints))
    cap = draw(arrays(np.float64, (d,), elements=small_ints))
    classes = draw(arrays(np.float64, (draw(st.integers(0, 3)), d), elements=small_ints))
    keep = draw(st.integers(1, n + 2))
    thr = float(draw(st.integers(-3, 5)))
    return cands, cap, classes, keep, thr


@given(candidate_sets())
@settings(max_examples=300, deadline=None)
def test_filter_matches_oracle_property(case):
    cands, cap, classes, keep, thr = case
    assert kept_indices(filter_backgrounds(cands, cap, classes, keep, thr)) == filter_oracle(cands, cap, classes, keep, thr)
    assert kept_indices(select_top_foregrounds(cands, cap, keep)) == top_oracle(cands, cap, keep)


@given(candidate_sets(), st.sampled_from([0.0, 0.05, 0.1, 0.5]))
@settings(max_examples=200, deadline=None)
def test_prune_matches_oracle_property(case, fraction):
    import math
    from fractions import Fraction

    cands, _, classes, _, _ = case
    if len(classes) == 0:
        classes = np.ones((1, cands.shape[1]))
    n_drop = math.ceil(Fraction(repr(fraction)) * len(cands))
    assert prune_fraction(cands, classes, fraction) == prune_oracle(cands, classes, n_drop)


def test_filter_log_lines(rng):
    buf = io.StringIO()
    decisions = prune_decisions(unit(rng, 4, 3), unit(rng, 1, 3), 0.25)
    write_filter_log(buf, "zero_shot_prune", decisions, run="x")
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(rows) == 4 and rows[0]["stage"] == "zero_shot_prune" and rows[0]["caption_similarity"] is None
    assert sum(not r["kept"] for r in rows) == 1
