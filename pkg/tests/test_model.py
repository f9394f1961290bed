"""Model-layer checks.

Frozen expected values (derived independently before implementation, by hand
or with a symbolic scratch script):
- stationary vectors: (2/3, 1/3) for the two-vertex example; (0.3, 0.2, 0.3,
  0.2) for the four-vertex ring.
- escape radii: 2 for {z^2}, 3 for {z^2-1}, 128 for the two-vertex example,
  1743 for the ring (driven by the z^4/64-type rows).
- expanded shifted-quartic coefficients are exact dyadics (in the configs).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mrds
from mrds.model import (
    INFINITY,
    Polynomial,
    chordal_distance,
    is_infinity,
    parse_system,
    serialize_system,
)

SQUARE = """
vertices = 1
[[edge]]
from = 1
to = 1
[[edge.atom]]
weight = 1.0
coeffs = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]
"""

BASILICA = """
vertices = 1
[[edge]]
from = 1
to = 1
[[edge.atom]]
weight = 1.0
coeffs = [[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]
"""


# ---------------------------------------------------------------- sphere


def test_chordal_basics():
    assert chordal_distance(0, 0) == 0.0
    assert chordal_distance(1 + 1j, 1 + 1j) == 0.0
    a, b = 0.3 - 0.7j, -1.1 + 0.2j
    assert chordal_distance(a, b) == chordal_distance(b, a)
    assert 0.0 <= chordal_distance(a, b) <= 2.0


def test_chordal_infinity_limit():
    d_prev = chordal_distance(10.0, INFINITY)
    for mag in (1e2, 1e4, 1e8):
        d = chordal_distance(mag + 0j, INFINITY)
        assert d < d_prev
        d_prev = d
    assert chordal_distance(INFINITY, INFINITY) == 0.0
    # d(0, inf) = 2, the sphere diameter
    assert chordal_distance(0, INFINITY) == 2.0


@given(
    st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
    st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
)
def test_chordal_symmetric_bounded(a, b):
    d = chordal_distance(a, b)
    assert 0.0 <= d <= 2.0
    assert d == chordal_distance(b, a)


# ---------------------------------------------------------------- polynomial


def test_polynomial_eval_and_infinity():
    f = Polynomial([-2, 0, 1])  # z^2 - 2... coeffs ascending: -2 + z^2
    assert f(0) == -2
    assert f(3) == 7
    assert is_infinity(f(INFINITY))


def test_polynomial_overflow_snaps():
    f = Polynomial([0, 0, 1])
    z = 1e120
    assert is_infinity(f(z))  # 1e240 overflows the snap threshold
    arr = f.eval_array(np.array([1e120 + 0j, 2.0 + 0j]))
    assert np.isinf(arr[0].real) and arr[1] == 4.0


def test_compose_degree_and_values():
    f = Polynomial([-1, 0, 1])  # z^2 - 1
    ff = f.compose(f)  # (z^2-1)^2 - 1 = z^4 - 2 z^2
    assert ff.degree == 4
    assert np.allclose(ff.coeffs, [0, 0, -2, 0, 1])
    rng = np.random.default_rng(7)
    zs = rng.standard_normal(100) + 1j * rng.standard_normal(100)
    direct = f.eval_array(f.eval_array(zs))
    composed = ff.eval_array(zs)
    assert np.max(np.abs(direct - composed) / (1 + np.abs(direct))) < 1e-9


@given(
    st.lists(
        st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
        min_size=3,
        max_size=5,
    ),
    st.lists(
        st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
        min_size=3,
        max_size=5,
    ),
)
@settings(max_examples=50)
def test_compose_matches_pointwise(fc, gc):
    fc[-1] = fc[-1] if abs(fc[-1]) > 0.1 else 1.0
    gc[-1] = gc[-1] if abs(gc[-1]) > 0.1 else 1.0
    f, g = Polynomial(fc), Polynomial(gc)
    h = f.compose(g)
    assert h.degree == f.degree * g.degree
    for z in (0.1 + 0.2j, -0.7j, 1.1):
        a, b = h(z), f(g(z))
        assert abs(a - b) <= 1e-9 * (1 + abs(a) + abs(b))


def test_derivative():
    f = Polynomial([5, 0, -2, 0, 1])  # 5 - 2z^2 + z^4
    df = f.derivative()
    assert np.allclose(df.coeffs, [0, -4, 0, 4])


# ---------------------------------------------------------------- parsing


def test_parse_two_vertex_example():
    s = mrds.load_config("basilica_pair")
    assert s.m == 2
    assert sorted((e.src, e.dst) for e in s.edges) == [(1, 1), (1, 2), (2, 1)]
    assert np.allclose(s.P, [[0.5, 0.5], [1.0, 0.0]])
    assert s.window == (-3.0, 3.0, -3.0, 3.0)


def test_parse_minimal_square():
    s = parse_system(SQUARE)
    assert s.m == 1
    assert [(e.src, e.dst) for e in s.edges] == [(1, 1)]


def test_parse_rejects_bad_row_sum():
    bad = SQUARE.replace("weight = 1.0", "weight = 0.9")
    with pytest.raises(mrds.StochasticityError):
        parse_system(bad)


def test_parse_rejects_low_degree():
    bad = SQUARE.replace(
        "coeffs = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]",
        "coeffs = [[0.0, 0.0], [1.0, 0.0]]",
    )
    with pytest.raises(mrds.DegreeError):
        parse_system(bad)


def test_parse_rejects_zero_leading():
    bad = SQUARE.replace(
        "coeffs = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]",
        "coeffs = [[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]",
    )
    with pytest.raises(mrds.DegreeError):
        parse_system(bad)


def test_parse_rejects_nonpositive_weight():
    bad = (
        "vertices = 1\n[[edge]]\nfrom = 1\nto = 1\n"
        "[[edge.atom]]\nweight = 0.0\ncoeffs = [[0.0,0.0],[0.0,0.0],[1.0,0.0]]\n"
        "[[edge.atom]]\nweight = 1.0\ncoeffs = [[0.0,0.0],[0.0,0.0],[1.0,0.0]]\n"
    )
    with pytest.raises(mrds.WeightError):
        parse_system(bad)


def test_parse_rejects_garbage_and_bad_vertices():
    with pytest.raises(mrds.SchemaError):
        parse_system("vertices = [nope")
    with pytest.raises(mrds.SchemaError):
        parse_system(SQUARE.replace("to = 1", "to = 7"))
    with pytest.raises(mrds.SchemaError):
        parse_system("vertices = 1\n")


def test_serialize_round_trip_exact():
    for name in ("basilica_pair", "shifted_ring", "square"):
        s = mrds.load_config(name)
        text = serialize_system(s)
        s2 = parse_system(text)
        assert s2.m == s.m
        assert np.array_equal(s2.P, s.P)
        for e, e2 in zip(
            sorted(s.edges, key=lambda e: (e.src, e.dst)),
            sorted(s2.edges, key=lambda e: (e.src, e.dst)),
        ):
            assert (e.src, e.dst) == (e2.src, e2.dst)
            for (p, w), (p2, w2) in zip(e.atoms, e2.atoms):
                assert w == w2  # bit-identical through decimal text
                assert p.coeffs == p2.coeffs
        assert serialize_system(s2) == text


# ---------------------------------------------------------------- graph ops


def test_irreducibility():
    assert mrds.is_irreducible(mrds.load_config("basilica_pair"))
    assert mrds.is_irreducible(mrds.load_config("shifted_ring"))
    assert mrds.is_irreducible(parse_system(SQUARE))
    assert not mrds.is_irreducible(mrds.load_config("one_way"))


def test_stationary_two_vertex():
    s = mrds.load_config("basilica_pair")
    p = mrds.stationary_vector(s)
    assert np.max(np.abs(p - [2 / 3, 1 / 3])) < 1e-12
    assert np.max(np.abs(p @ s.P - p)) <= 1e-12


def test_stationary_ring():
    s = mrds.load_config("shifted_ring")
    p = mrds.stationary_vector(s)
    assert np.max(np.abs(p - [0.3, 0.2, 0.3, 0.2])) < 1e-12


def test_stationary_single():
    p = mrds.stationary_vector(parse_system(SQUARE))
    assert np.allclose(p, [1.0])


def test_stationary_refuses_reducible():
    with pytest.raises(mrds.NotIrreducible):
        mrds.stationary_vector(mrds.load_config("one_way"))


def test_essential_nondeterminism():
    assert mrds.is_essentially_nondeterministic(mrds.load_config("basilica_pair"))
    assert mrds.is_essentially_nondeterministic(mrds.load_config("shifted_ring"))
    assert not mrds.is_essentially_nondeterministic(parse_system(SQUARE))
    # one loop edge with two distinct atom maps qualifies
    two_atoms = (
        "vertices = 1\n[[edge]]\nfrom = 1\nto = 1\n"
        "[[edge.atom]]\nweight = 0.5\ncoeffs = [[0.0,0.0],[0.0,0.0],[1.0,0.0]]\n"
        "[[edge.atom]]\nweight = 0.5\ncoeffs = [[-1.0,0.0],[0.0,0.0],[1.0,0.0]]\n"
    )
    assert mrds.is_essentially_nondeterministic(parse_system(two_atoms))
    # duplicate identical atoms on one edge do not qualify
    dup_atoms = two_atoms.replace("[[-1.0,0.0],[0.0,0.0],[1.0,0.0]]", "[[0.0,0.0],[0.0,0.0],[1.0,0.0]]")
    assert not mrds.is_essentially_nondeterministic(parse_system(dup_atoms))


# ---------------------------------------------------------------- escape radius


@pytest.mark.parametrize(
    "cfg,expected",
    [(SQUARE, 2.0), (BASILICA, 3.0)],
)
def test_escape_radius_small(cfg, expected):
    assert mrds.escape_radius(parse_system(cfg)) == expected


def test_escape_radius_examples():
    assert mrds.escape_radius(mrds.load_config("basilica_pair")) == 128.0
    assert mrds.escape_radius(mrds.load_config("shifted_ring")) == 1743.0


@pytest.mark.parametrize("name", ["square", "basilica_pair", "shifted_ring"])
def test_escape_radius_doubles(name):
    # the certificate itself: |f(z)| >= 2 |z| on the circle |z| = R
    s = mrds.load_config(name)
    R = mrds.escape_radius(s)
    angles = np.linspace(0, 2 * math.pi, 1000, endpoint=False)
    for radius in (R, 1.7 * R, 40 * R):
        zs = radius * np.exp(1j * angles)
        for poly in s.atom_polys():
            w = poly.eval_array(zs.copy())
            # 1e-12 relative slack absorbs rounding of exp/abs at the
            # boundary circle where the bound is tight
            ok = np.isinf(np.abs(w)) | (np.abs(w) >= 2 * np.abs(zs) * (1 - 1e-12))
            assert np.all(ok)
