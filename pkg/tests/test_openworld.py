import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occgrounder.errors import ShapeError
from occgrounder.grounding import TokenGroups
from occgrounder.openworld import (
    Criterion,
    class_entropy_report,
    entropy,
    entropy_report_csv,
    infer_occupancy,
    query_scores,
    select,
    softmax_probs,
)
from oracles import brute_infer


def test_entropy_examples():
    assert entropy([0.25] * 4) == pytest.approx(1.386294, abs=1e-6)
    assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.039721, abs=1e-6)
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)


def test_select_examples():
    p = np.array([[0.9, 0.1], [0.5, 0.5], [0.6, 0.4]])
    q = np.array([[0.5, 0.5], [0.8, 0.2], [0.4, 0.6]])
    final, c = select(p, q, "min-entropy")
    assert c.tolist() == [1, 0, 1]
    assert np.array_equal(final, [[0.9, 0.1], [0.8, 0.2], [0.6, 0.4]])
    _, c = select(p, q, Criterion.MAX_CONFIDENCE)
    assert c.tolist() == [1, 0, 1]
    final, c = select(p, None, Criterion.GROUNDING_ONLY)
    assert c.tolist() == [1, 1, 1] and np.array_equal(final, p)
    with pytest.raises(ShapeError):
        select(p, q[:2])
    with pytest.raises(ValueError):
        select(p, q, "coin-flip")


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Criterion)))
def test_select_idempotent(seed, crit):
    rng = np.random.default_rng(seed)
    p = softmax_probs(rng.normal(size=(6, 4)))
    q = softmax_probs(rng.normal(size=(6, 4)))
    final, c = select(p, q, crit)
    again, c2 = select(final, final, crit)
    assert np.array_equal(again, final) and c2.all()
    assert np.all((final == p).all(axis=1) | (final == q).all(axis=1))


@given(st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    p = softmax_probs(rng.normal(0, 30, size=(10, 7)))
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9
    assert np.all(p >= 0)


def _problem(rng):
    groups = TokenGroups.from_token_counts([[1, 1], [1], [1, 1, 1]])
    text = rng.normal(size=(6, 5))
    free = rng.normal(size=5)
    return groups, text, free


def test_grounding_only_ignores_adapted():
    rng = np.random.default_rng(0)
    groups, text, free = _problem(rng)
    v = rng.normal(size=(20, 5))
    a = infer_occupancy(v, None, text, free, groups, Criterion.GROUNDING_ONLY)
    b = infer_occupancy(v, rng.normal(size=(20, 5)), text, free, groups, Criterion.GROUNDING_ONLY)
    assert np.array_equal(a.labels, b.labels) and a.indicator.all()
    with pytest.raises(ShapeError):
        infer_occupancy(v, None, text, free, groups, Criterion.MIN_ENTROPY)


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Criterion)))
def test_infer_matches_brute_force(seed, crit):
    rng = np.random.default_rng(seed)
    groups, text, free = _problem(rng)
    v = rng.normal(size=(15, 5))
    a = rng.normal(size=(15, 5))
    res = infer_occupancy(v, a, text, free, groups, crit)
    labels, c = brute_infer(v.tolist(), a.tolist(), text.tolist(), free.tolist(), [[[0], [1]], [[2]], [[3], [4], [5]]], crit.value)
    assert np.array_equal(res.labels, labels)
    assert np.array_equal(res.indicator, c)


def test_query_scores_drop_noise_rows():
    rng = np.random.default_rng(3)
    groups, text, free = _problem(rng)
    v = rng.normal(size=(4, 5))
    assert np.array_equal(query_scores(v, text, free, groups.with_noise(3)), query_scores(v, text, free, groups))


def test_grid_uses_free_label():
    rng = np.random.default_rng(4)
    groups, text, free = _problem(rng)
    from occgrounder.voxelcore import GridSpec

    res = infer_occupancy(rng.normal(size=(8, 5)), None, text, free, groups, "grounding-only")
    grid = res.grid(GridSpec((0, 0, 0), (1, 1, 1), (2, 2, 2)))
    assert grid.free_id == 3


def test_class_entropy_report():
    onehot = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    uniform = np.full((2, 3), 1 / 3)
    rows = class_entropy_report(onehot, uniform, [0, 0], ["a", "b", "free"])
    assert rows[0] == {"class": "a", "voxels": 2, "grounding_entropy": 0.0, "adapted_entropy": pytest.approx(math.log(3))}
    assert rows[1]["voxels"] == 0 and rows[1]["grounding_entropy"] is None
    mixed = class_entropy_report(np.vstack([onehot, uniform]), np.vstack([uniform, onehot]), [1, 1, 2, 2], ["a", "b", "free"])
    assert mixed[1]["grounding_entropy"] == 0.0
    assert mixed[2]["grounding_entropy"] == pytest.approx(math.log(3))
    assert mixed[2]["adapted_entropy"] == 0.0
    text = entropy_report_csv(mixed)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert [r["class"] for r in parsed] == ["a", "b", "free"]
    assert parsed[0]["grounding_entropy"] == ""
    assert float(parsed[2]["grounding_entropy"]) == pytest.approx(math.log(3), abs=1e-9)
