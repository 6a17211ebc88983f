import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lasafl.aggregators import (
    AGGREGATOR_KEYS,
    LasaParams,
    SparseFed,
    SparseFedState,
    bulyan,
    fedavg,
    geometric_median,
    krum_scores,
    lasa,
    make_aggregator,
    multi_krum,
    sparsefed_lite,
    trimmed_mean,
)
from lasafl.sparsify import SparsificationLevel, sparsify_update
from lasafl.update import LayeredUpdate, UpdateBatch, make_layout

from conftest import random_batch
from oracles import kahan_mean, lasa_trace, sorted_trimmed_mean

ONE = make_layout([("w", 1)])


def col(*vals):
    return UpdateBatch.from_matrix(np.array(vals, dtype=float).reshape(-1, 1), ONE, tuple(range(len(vals))))


# ---- lasa ------------------------------------------------------------------

def test_lasa_identical_clients():
    layout = make_layout([("w", 3), ("b", 2)])
    u = LayeredUpdate([0.1, -2.0, 0.5, 3.0, -0.2], layout)
    batch = UpdateBatch((u, u, u), (7, 8, 9))
    out = lasa(batch, LasaParams(SparsificationLevel(0.4), 0.5, 0.5))
    assert np.array_equal(out.aggregate.values, sparsify_update(u, 0.4).values)
    assert out.selected == (frozenset({7, 8, 9}),) * 2


def test_lasa_without_filtering_is_mean(rng):
    batch = random_batch(rng, 6, [4, 3])
    out = lasa(batch, LasaParams(SparsificationLevel(0.0), 1e9, 1e9))
    assert np.allclose(out.aggregate.values, batch.matrix().mean(axis=0), atol=1e-15)


def test_lasa_excludes_flipped_outlier():
    common = np.array([1.0, 2.0, 3.0, 4.0])
    rows = np.vstack([common] * 4 + [-10 * common])
    batch = UpdateBatch.from_matrix(rows, make_layout([("w", 4)]), (0, 1, 2, 3, 4))
    out = lasa(batch, LasaParams(SparsificationLevel(0.0), 1.0, 1.0))
    assert out.selected == (frozenset({0, 1, 2, 3}),)
    assert np.array_equal(out.aggregate.values, common)
    # MZ scores by hand: magnitude 9m/3.6m, purity -1/0.4
    assert out.diagnostics["mz_magnitude"][0][4] == pytest.approx(2.5)
    assert out.diagnostics["mz_direction"][0][4] == pytest.approx(-2.5)


def test_lasa_empty_selection_falls_back_to_most_central():
    # two tight pairs far apart: every client sits at |z| = 1 on magnitude
    rows = np.array([[1.0], [1.0], [5.0], [5.0]])
    batch = UpdateBatch.from_matrix(rows, ONE, (0, 1, 2, 3))
    out = lasa(batch, LasaParams(SparsificationLevel(0.0), 0.5, 1.0))
    assert out.selected == (frozenset({0}),)
    assert out.aggregate.values.tolist() == [1.0]


def test_lasa_layers_filtered_independently():
    layout = make_layout([("a", 2), ("b", 2)])
    good = [[1.0, 1.0, 1.0, 1.0]] * 4
    bad = [[1.0, 1.0, -50.0, -50.0]]
    batch = UpdateBatch.from_matrix(np.array(good + bad), layout, (0, 1, 2, 3, 4))
    out = lasa(batch, LasaParams(SparsificationLevel(0.0), 2.0, 1.0))
    assert out.selected[0] == frozenset(range(5))
    assert out.selected[1] == frozenset(range(4))


def test_lasa_empty_batch_rejected():
    with pytest.raises(ValueError):
        lasa(UpdateBatch((), ()))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lasa_matches_trace(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 9))
    dims = [int(v) for v in r.integers(1, 7, size=int(r.integers(1, 4)))]
    batch = random_batch(r, n, dims)
    level = float(r.choice([0.0, 0.2, 0.5, 0.9]))
    p = LasaParams(SparsificationLevel(level), float(r.uniform(0.3, 2.5)), float(r.uniform(0.3, 2.5)))
    out = lasa(batch, p)
    layers = [(s.offset, s.length) for s in batch.layout]
    agg, chosen = lasa_trace(batch.matrix().tolist(), layers, level, p.lambda_m, p.lambda_d)
    assert np.allclose(out.aggregate.values, agg, rtol=0, atol=1e-10)
    assert [sorted(s) for s in out.selected] == [sorted(c) for c in chosen]


# ---- fedavg / trimmed mean --------------------------------------------------

def test_fedavg_examples(rng):
    assert fedavg(col(1, 3)).aggregate.values.tolist() == [2]
    assert fedavg(col(4.5)).aggregate.values.tolist() == [4.5]
    batch = random_batch(rng, 10, [7])
    oracle = kahan_mean(batch.matrix().tolist())
    assert np.allclose(fedavg(batch).aggregate.values, oracle, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        fedavg(UpdateBatch((), ()))


def test_trimmed_mean_examples(rng):
    assert trimmed_mean(col(1, 2, 3, 100), 1).aggregate.values.tolist() == [2.5]
    batch = random_batch(rng, 7, [5])
    assert np.array_equal(trimmed_mean(batch, 0).aggregate.values, fedavg(batch).aggregate.values)
    oracle = sorted_trimmed_mean(batch.matrix().tolist(), 2)
    assert np.allclose(trimmed_mean(batch, 2).aggregate.values, oracle, atol=1e-12)
    with pytest.raises(ValueError):
        trimmed_mean(col(1, 2, 3, 4), 2)


# ---- geometric median -------------------------------------------------------

def test_geomed_1d_and_identical():
    out = geometric_median(col(0, 0, 10))
    assert abs(out.aggregate.values[0]) < 1e-6
    same = UpdateBatch.from_matrix(np.tile([1.0, -2.0], (4, 1)), make_layout([("w", 2)]))
    assert np.allclose(geometric_median(same).aggregate.values, [1.0, -2.0])


def test_geomed_triangle_matches_grid():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    batch = UpdateBatch.from_matrix(pts, make_layout([("w", 2)]))
    got = geometric_median(batch, tol=1e-12, max_iter=10000).aggregate.values
    g = np.linspace(0, 1, 1001)
    xx, yy = np.meshgrid(g, g)
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    obj = sum(np.linalg.norm(grid - p, axis=1) for p in pts)
    best = grid[np.argmin(obj)]
    assert np.linalg.norm(got - best) <= 2e-3
    # the Fermat point of this triangle lies on the diagonal
    assert got[0] == pytest.approx(got[1], abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_geomed_objective_never_above_mean(seed):
    r = np.random.default_rng(seed)
    batch = random_batch(r, int(r.integers(1, 9)), [int(r.integers(1, 5))])
    out = geometric_median(batch)
    objs = out.diagnostics["objective"]
    assert all(o <= objs[0] * (1 + 1e-12) + 1e-300 for o in objs)


# ---- krum family ------------------------------------------------------------

def test_multikrum_examples():
    rows = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [9.0, 9.0]])
    batch = UpdateBatch.from_matrix(rows, make_layout([("w", 2)]), (0, 1, 2, 3))
    # brute-force scores with n - f - 2 = 2 neighbours
    d = [[float(np.sum((a - b) ** 2)) for b in rows] for a in rows]
    brute = [sum(sorted(d[i][j] for j in range(4) if j != i)[:2]) for i in range(4)]
    assert np.allclose(krum_scores(rows, 0), brute)
    out = multi_krum(batch, f=0, m=1)
    assert next(iter(out.selected[0])) in {0, 1, 2}

    same = UpdateBatch.from_matrix(np.tile([2.0, 3.0], (5, 1)), make_layout([("w", 2)]))
    assert np.array_equal(multi_krum(same, 1).aggregate.values, [2.0, 3.0])

    full = multi_krum(batch, f=0, m=4)
    assert full.selected[0] == frozenset(range(4))
    assert np.allclose(full.aggregate.values, rows.mean(axis=0))


def test_multikrum_admissibility():
    batch = col(1, 2, 3, 4)
    with pytest.raises(ValueError):
        multi_krum(batch, f=1)
    with pytest.raises(ValueError):
        multi_krum(col(1, 2, 3, 4, 5), f=1, m=5)


def test_bulyan_examples(rng):
    batch = random_batch(rng, 5, [3])
    assert np.allclose(bulyan(batch, 0).aggregate.values, batch.matrix().mean(axis=0))
    same = UpdateBatch.from_matrix(np.tile([1.0, -1.0], (7, 1)), make_layout([("w", 2)]))
    assert np.array_equal(bulyan(same, 1).aggregate.values, [1.0, -1.0])
    with pytest.raises(ValueError):
        bulyan(random_batch(rng, 6, [2]), 1)


def test_bulyan_ignores_planted_outlier(rng):
    base = rng.normal(0, 1, (6, 4))
    outs = []
    for scale in (1e2, 1e4, 1e6):
        rows = np.vstack([base, np.full((1, 4), scale)])
        batch = UpdateBatch.from_matrix(rows, make_layout([("w", 4)]), tuple(range(7)))
        res = bulyan(batch, 1)
        assert 6 not in res.diagnostics["candidates"]
        outs.append(res.aggregate.values)
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[1], outs[2])


# ---- sparsefed ---------------------------------------------------------------

def test_sparsefed_full_k_is_mean(rng):
    batch = random_batch(rng, 4, [5])
    out, state = sparsefed_lite(batch, 5, math.inf)
    assert np.allclose(out.aggregate.values, batch.matrix().mean(axis=0))
    assert np.array_equal(state.residual, np.zeros(5))


def test_sparsefed_residual_bookkeeping(rng):
    batch = random_batch(rng, 4, [6])
    state = SparseFedState(rng.normal(size=6))
    out, new = sparsefed_lite(batch, 2, 1.5, state)
    pre = out.diagnostics["pre_sparse"]
    assert np.array_equal(new.residual, pre - out.aggregate.values)


def test_sparsefed_two_round_trace():
    layout = make_layout([("w", 3)])
    r1 = UpdateBatch.from_matrix(np.array([[4.0, 1.0, 0.0], [2.0, 1.0, 2.0]]), layout)
    r2 = UpdateBatch.from_matrix(np.array([[0.0, 0.0, 0.0], [0.0, 2.0, 0.0]]), layout)
    agg = SparseFed(SparsificationLevel(2 / 3))  # k = 1 of 3
    # round 1: mean [3,1,1] -> emit [3,0,0], carry [0,1,1]
    assert agg(r1).aggregate.values.tolist() == [3.0, 0.0, 0.0]
    assert agg.state.residual.tolist() == [0.0, 1.0, 1.0]
    # round 2: mean [0,1,0] + carry -> [0,2,1] -> emit [0,2,0], carry [0,0,1]
    assert agg(r2).aggregate.values.tolist() == [0.0, 2.0, 0.0]
    assert agg.state.residual.tolist() == [0.0, 0.0, 1.0]


def test_sparsefed_clipping():
    layout = make_layout([("w", 2)])
    batch = UpdateBatch.from_matrix(np.array([[3.0, 4.0], [0.3, 0.4]]), layout)
    out, _ = sparsefed_lite(batch, 2, 1.0)
    assert np.allclose(out.aggregate.values, [(0.6 + 0.3) / 2, (0.8 + 0.4) / 2])


# ---- shared properties --------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["lasa", "fedavg", "trmean", "geomed", "multikrum", "bulyan"]))
def test_permutation_invariance(seed, key):
    r = np.random.default_rng(seed)
    batch = random_batch(r, 7, [3, 2])
    agg = make_aggregator(key, {"f": 1})
    perm = r.permutation(7)
    a = agg(batch)
    b = agg(batch.subset(perm))
    assert np.allclose(a.aggregate.values, b.aggregate.values, rtol=0, atol=1e-12)
    assert a.selected == b.selected


def test_registry_covers_keys(rng):
    batch = random_batch(rng, 7, [3])
    for key in AGGREGATOR_KEYS:
        out = make_aggregator(key, {"f": 1})(batch)
        assert out.aggregate.dim == 3
        assert all(s <= frozenset(batch.client_ids) for s in out.selected)
    with pytest.raises(ValueError):
        make_aggregator("nope")
