"""Escape-probability routes: Monte Carlo, certified tree intervals, and
operator iteration must agree with each other and with hand-computed values."""

import numpy as np
import pytest

from mrds import load_config
from mrds.errors import NoConvergence
from mrds.grid import GridField, complex_grid
from mrds.tinf import (
    ProbBounds,
    markov_step,
    monte_carlo_T,
    operator_sweep,
    sweep_T,
    tree_bounds,
    tree_sweep_vertex,
)


@pytest.fixture(scope="module")
def square():
    return load_config("square.toml")


@pytest.fixture(scope="module")
def pair():
    return load_config("basilica_pair.toml")


@pytest.fixture(scope="module")
def ring():
    return load_config("shifted_ring.toml")


# ------------------------------------------------------------- tree bounds


def test_tree_escaped_point_is_certain(square):
    b = tree_bounds(square, 3.0, 1, 10)
    assert b.lower == 1.0 and b.upper == 1.0 and b.depth == 0


def test_tree_square_inside_unit_disk_never_resolves(square):
    # single deterministic branch that stays bounded: upper must stay 1
    b = tree_bounds(square, 0.5, 1, 30)
    assert b.lower == 0.0
    assert b.upper == 1.0
    assert b.resolved_mass == 0.0


def test_tree_square_outside_certifies_fast(square):
    b = tree_bounds(square, 1.5, 1, 30)
    assert b == ProbBounds(1.0, 1.0, 1, 1.0, False)


def test_tree_pair_origin_upper_stays_positive(pair):
    # superattracting core: nothing ever escapes, nothing is ever certified
    b = tree_bounds(pair, 0.0, 1, 24)
    assert b.lower == 0.0 and b.upper > 0.0


def test_tree_pair_mixed_point_exact_half(pair):
    # stay-at-vertex-1 mass escapes by step 3, the early jump tames the
    # orbit into the superattracting core; the split is an exact dyadic
    b = tree_bounds(pair, 1.65, 1, 8)
    assert b.lower == 0.5
    assert b.upper == 1.0


def test_tree_bounds_nested_in_depth(pair):
    prev = tree_bounds(pair, 1.65, 1, 2)
    for d in (4, 8, 12, 16):
        cur = tree_bounds(pair, 1.65, 1, d)
        assert cur.lower >= prev.lower - 1e-15
        assert cur.upper <= prev.upper + 1e-15
        prev = cur


def test_tree_budget_flag(ring):
    b = tree_bounds(ring, 5.03125, 1, 40, node_budget=50)
    assert b.budget_exceeded
    assert 0.0 <= b.lower <= b.upper <= 1.0


def test_tree_infinity_point(square):
    b = tree_bounds(square, complex(np.inf, 0.0), 1, 5)
    assert b.lower == 1.0 and b.upper == 1.0


# ------------------------------------------------------------- Monte Carlo


def test_mc_matches_exact_mixed_point(pair):
    est = monte_carlo_T(pair, 1.65, 1, 20000, 60, seed=3)
    assert abs(est.mean - 0.5) <= 4 * est.stderr
    assert est.stderr == pytest.approx(np.sqrt(est.mean * (1 - est.mean) / 20000))


def test_mc_deterministic_replay(pair):
    a = monte_carlo_T(pair, 1.65, 1, 5000, 40, seed=11, stream_id=2)
    b = monte_carlo_T(pair, 1.65, 1, 5000, 40, seed=11, stream_id=2)
    c = monte_carlo_T(pair, 1.65, 1, 5000, 40, seed=11, stream_id=3)
    assert a == b
    assert a != c  # different stream, same seed


def test_mc_extremes(square):
    assert monte_carlo_T(square, 0.25, 1, 500, 30, seed=1).mean == 0.0
    assert monte_carlo_T(square, 1.5, 1, 500, 30, seed=1).mean == 1.0
    assert monte_carlo_T(square, 99.0, 1, 500, 30, seed=1) .mean == 1.0


def test_mc_inside_tree_interval_multi_point(pair):
    gen = np.random.Generator(np.random.Philox(key=[99, 0]))
    pts = gen.uniform(-2.2, 2.2, size=(12, 2))
    for k, (x, y) in enumerate(pts):
        z = complex(x, y)
        for v in (1, 2):
            tb = tree_bounds(pair, z, v, 22)
            est = monte_carlo_T(pair, z, v, 3000, 48, seed=7, stream_id=10 * k + v)
            slack = 4 * max(est.stderr, 1e-3)
            assert tb.lower - slack <= est.mean <= tb.upper + slack, (z, v)


# ------------------------------------------------------- operator iteration


def test_operator_pair_matches_exact_values(pair):
    vals, meta = operator_sweep(pair, (-3, 3, -3, 3), 128, 128, tol=1e-4, pad_factor=1.5)
    z = complex_grid((-3, 3, -3, 3), 128, 128)
    at = lambda f, w: f[np.unravel_index(np.argmin(np.abs(z - w)), z.shape)]
    assert at(vals[0], 0.0) == pytest.approx(0.0, abs=2e-3)
    assert at(vals[0], 1.65) == pytest.approx(0.5, abs=5e-3)
    assert at(vals[0], 2.8) == pytest.approx(1.0, abs=2e-3)
    assert at(vals[1], 0.0) == pytest.approx(0.0, abs=2e-3)
    assert meta["iterations"] < 200


def test_operator_ring_plus_minus_five(ring):
    tf = sweep_T(ring, (-16, 16, -16, 16), 128, 128, method="operator_iteration", tol=1e-4)
    z = complex_grid((-16, 16, -16, 16), 128, 128)
    idx5 = np.unravel_index(np.argmin(np.abs(z - 5)), z.shape)
    idxm5 = np.unravel_index(np.argmin(np.abs(z + 5)), z.shape)
    per_vertex = [tf.vertex_fields[v].values[idx5] for v in range(4)]
    assert per_vertex == pytest.approx([0.0, 0.0, 1.0, 1.0], abs=2e-3)
    assert tf.aggregate.values[idx5] == pytest.approx(0.5, abs=2e-3)
    assert tf.aggregate.values[idxm5] == pytest.approx(0.5, abs=2e-3)


def test_operator_fields_bounded_and_one_at_edges(pair):
    vals, _ = operator_sweep(pair, (-3, 3, -3, 3), 96, 96, tol=1e-4, pad_factor=1.5)
    assert (vals >= -1e-12).all() and (vals <= 1 + 1e-12).all()


def test_markov_step_fixed_point(ring):
    # converge unpadded, then one more application barely moves the field
    vals, _ = operator_sweep(ring, (-16, 16, -16, 16), 128, 128, tol=2e-4)
    fields = [
        GridField((-16, 16, -16, 16), 128, 128, vals[v], v + 1) for v in range(4)
    ]
    stepped = markov_step(ring, fields)
    diff = max(
        float(np.max(np.abs(stepped[v].values - fields[v].values))) for v in range(4)
    )
    assert diff < 1e-3


def test_markov_step_constant_one_is_fixed(pair):
    fields = [
        GridField((-3, 3, -3, 3), 32, 32, np.ones((32, 32)), v + 1) for v in range(2)
    ]
    stepped = markov_step(pair, fields)
    for f in stepped:
        assert np.allclose(f.values, 1.0, atol=1e-12)


def test_markov_step_counts_out_of_window_reads(pair):
    fields = [
        GridField((-3, 3, -3, 3), 32, 32, np.zeros((32, 32)), v + 1) for v in range(2)
    ]
    stepped = markov_step(pair, fields)
    # plenty of pixels map to |f(z)| between 3 and R=128
    assert stepped[0].meta["out_of_window_reads"] > 0


def test_operator_nonconvergence_raises(pair):
    with pytest.raises(NoConvergence):
        operator_sweep(pair, (-3, 3, -3, 3), 64, 64, tol=1e-12, max_iters=3)


def test_operator_pad_factor_validation(pair):
    with pytest.raises(ValueError):
        operator_sweep(pair, (-3, 3, -3, 3), 30, 30, tol=1e-3, pad_factor=1.5)


# ----------------------------------------------------------------- sweeps


def test_tree_sweep_matches_single_point_calls(pair):
    win = (-3, 3, -3, 3)
    lo, wd, fl = tree_sweep_vertex(pair, win, 24, 24, 1, max_depth=14)
    z = complex_grid(win, 24, 24)
    gen = np.random.Generator(np.random.Philox(key=[5, 5]))
    rows = gen.integers(0, 24, size=10)
    cols = gen.integers(0, 24, size=10)
    for r, c in zip(rows, cols):
        b = tree_bounds(pair, complex(z[r, c]), 1, 14)
        assert lo[r, c] == b.lower
        assert lo[r, c] + wd[r, c] == pytest.approx(b.upper, abs=1e-15)


def test_tree_sweep_thread_count_invariant(ring):
    win = (-16, 16, -16, 16)
    a = tree_sweep_vertex(ring, win, 48, 48, 2, max_depth=12, threads=1)
    b = tree_sweep_vertex(ring, win, 48, 48, 2, max_depth=12, threads=4)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_sweep_tree_aggregate_brackets_operator(ring):
    win = (-16, 16, -16, 16)
    tr = sweep_T(ring, win, 48, 48, method="tree", depth=18, threads=2)
    op = sweep_T(ring, win, 48, 48, method="operator_iteration", tol=1e-4)
    agg_lo = tr.aggregate.values
    agg_up = sum(tr.p[v] * tr.upper_fields[v].values for v in range(4))
    ok = (op.aggregate.values >= agg_lo - 5e-3) & (op.aggregate.values <= agg_up + 5e-3)
    assert ok.mean() > 0.995  # operator value sits inside the certified interval


def test_sweep_monte_carlo_grid_deterministic(pair):
    win = (-3, 3, -3, 3)
    a = sweep_T(pair, win, 8, 8, method="monte_carlo", samples=100, seed=2, max_steps=30)
    b = sweep_T(
        pair, win, 8, 8, method="monte_carlo", samples=100, seed=2, max_steps=30, threads=3
    )
    assert np.array_equal(a.aggregate.values, b.aggregate.values)


def test_sweep_aggregate_is_stationary_mix(pair):
    win = (-3, 3, -3, 3)
    tf = sweep_T(pair, win, 16, 16, method="operator_iteration", tol=1e-3, pad_factor=1.5)
    mix = tf.p[0] * tf.vertex_fields[0].values + tf.p[1] * tf.vertex_fields[1].values
    assert np.allclose(tf.aggregate.values, mix, atol=1e-15)
    assert tf.p == pytest.approx([2 / 3, 1 / 3])


def test_sweep_rejects_unknown_method(pair):
    with pytest.raises(ValueError):
        sweep_T(pair, (-3, 3, -3, 3), 8, 8, method="nope")
