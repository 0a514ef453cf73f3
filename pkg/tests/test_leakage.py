import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diversim.leakage import (
    ChannelMatrix,
    TimingSamples,
    ba_capacity,
    build_channel,
    capacity_from_samples,
    capacity_reduction,
)

from capacity_oracle import grid_capacity


def h2(p):
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def test_identity_channel():
    assert abs(ba_capacity(np.eye(2)).capacity_bits - 1.0) <= 1e-9


def test_identical_rows():
    assert ba_capacity(np.array([[0.3, 0.7], [0.3, 0.7]])).capacity_bits <= 1e-9


@pytest.mark.parametrize("p", [0.05, 0.1, 0.25])
def test_bsc(p):
    W = np.array([[1 - p, p], [p, 1 - p]])
    assert abs(ba_capacity(W).capacity_bits - (1 - h2(p))) < 1e-6


def test_bsc_golden():
    W = np.array([[0.9, 0.1], [0.1, 0.9]])
    assert abs(ba_capacity(W).capacity_bits - 0.5310044) < 1e-6


def test_random_2x16_against_grid_search():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        W = rng.dirichlet(np.full(16, 0.5), size=2)
        W /= W.sum(axis=1, keepdims=True)
        res = ba_capacity(W)
        assert res.converged
        assert abs(res.capacity_bits - grid_capacity(W)) < 1e-6


def test_column_permutation_2x8():
    rng = np.random.default_rng(4)
    for _ in range(100):
        W = rng.dirichlet(np.ones(8), size=2)
        perm = rng.permutation(8)
        a = ba_capacity(W, tol=1e-13).capacity_bits
        assert abs(a - ba_capacity(W[:, perm], tol=1e-13).capacity_bits) < 1e-9


def test_merging_columns_2x8():
    rng = np.random.default_rng(5)
    for _ in range(100):
        W = rng.dirichlet(np.ones(8), size=2)
        i, j = sorted(rng.choice(8, size=2, replace=False))
        merged = np.delete(W, j, axis=1)
        merged[:, i] += W[:, j]
        assert ba_capacity(merged).capacity_bits <= ba_capacity(W).capacity_bits + 1e-9


def test_z_channel_has_asymmetric_optimum():
    W = np.array([[1.0, 0.0], [0.5, 0.5]])
    res = ba_capacity(W)
    # closed form: log2(1 + (1-e) e^(e/(1-e))) with e = 0.5 -> log2(1.25)
    assert abs(res.capacity_bits - math.log2(1.25)) < 1e-6
    assert res.input_distribution[1] < 0.5  # the noisy input is used less


def test_rejects_bad_rows():
    with pytest.raises(ValueError):
        ba_capacity(np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        ba_capacity(np.array([[-0.1, 1.1], [0.5, 0.5]]))


def test_build_channel_examples():
    disjoint = build_channel(TimingSamples.from_mapping({"key0": [10, 10], "key1": [20, 20]}))
    assert disjoint.outputs == [10, 20]
    assert np.array_equal(disjoint.rows, np.eye(2))
    same = build_channel(TimingSamples.from_mapping({"key0": [10, 10], "key1": [10, 10]}))
    assert np.array_equal(same.rows[0], same.rows[1])
    ch = build_channel(TimingSamples.from_mapping({"key0": [10, 10, 12, 12], "key1": [10, 12, 12, 12]}))
    assert np.allclose(ch.rows, [[0.5, 0.5], [0.25, 0.75]])


def test_timing_samples_validation():
    with pytest.raises(ValueError):
        TimingSamples.from_mapping({"key0": [1]})
    with pytest.raises(ValueError):
        TimingSamples.from_mapping({"key0": [1], "key1": []})


def test_capacity_from_samples_disjoint():
    assert abs(capacity_from_samples({"a": [5] * 10, "b": [6] * 10}).capacity_bits - 1) < 1e-9


def test_capacity_reduction():
    assert capacity_reduction(1.0, 0.20) == pytest.approx(80.0)
    assert capacity_reduction(1.0, 0.14) == pytest.approx(86.0)
    assert capacity_reduction(0.7, 0.7) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        capacity_reduction(0.0, 0.0)


_channels = st.integers(2, 4).flatmap(
    lambda m: st.integers(2, 6).flatmap(
        lambda n: arrays(np.float64, (m, n), elements=st.floats(0.0, 1.0)).filter(lambda a: np.all(a.sum(axis=1) > 1e-3))
    )
)


def _normalize(a):
    return a / a.sum(axis=1, keepdims=True)


@settings(max_examples=100, deadline=None)
@given(_channels)
def test_capacity_bounds(raw):
    W = _normalize(raw)
    res = ba_capacity(W, max_iter=5000)
    assert 0.0 <= res.capacity_bits <= math.log2(W.shape[0])
    # near-duplicate rows make the bound gap shrink only sublinearly
    assert res.bound_gap < 1e-4
    if res.converged:
        assert res.bound_gap < 1e-9


@settings(max_examples=150, deadline=None)
@given(_channels, st.randoms(use_true_random=False))
def test_permutation_invariance(raw, rnd):
    W = _normalize(raw)
    rows = list(range(W.shape[0]))
    cols = list(range(W.shape[1]))
    rnd.shuffle(rows)
    rnd.shuffle(cols)
    assert abs(ba_capacity(W, max_iter=5000).capacity_bits - ba_capacity(W[rows][:, cols], max_iter=5000).capacity_bits) < 1e-4


@settings(max_examples=150, deadline=None)
@given(_channels)
def test_merging_outputs_never_increases_capacity(raw):
    W = _normalize(raw)
    merged = np.column_stack([W[:, 0] + W[:, 1], W[:, 2:]]) if W.shape[1] > 2 else W.sum(axis=1, keepdims=True)
    assert ba_capacity(merged, max_iter=5000).capacity_bits <= ba_capacity(W, max_iter=5000).capacity_bits + 1e-4


def test_channel_matrix_input_accepted():
    ch = ChannelMatrix(["a", "b"], [1, 2], np.eye(2))
    assert abs(ba_capacity(ch).capacity_bits - 1) < 1e-9
