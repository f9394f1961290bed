"""Core data model: sphere points, polynomials, weighted edge systems.

A system is a finite directed graph on vertices 1..m where each edge (i,j)
carries a finitely supported distribution over polynomial maps of degree >= 2
(atoms with positive weights). Outgoing weights sum to 1 at every vertex, so
the edge totals form a row-stochastic matrix P. The random dynamics moves a
point z sitting at vertex i by drawing an edge/atom and applying the map.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np
import tomli

from .errors import (
    DegreeError,
    NoConvergence,
    NotIrreducible,
    SchemaError,
    StochasticityError,
    WeightError,
)

# The point at infinity. Any value whose real or imaginary part is non-finite
# is treated as infinity; polynomial evaluation snaps there once modulus
# exceeds OVERFLOW_SNAP so float overflow can never produce NaNs mid-orbit.
INFINITY = complex(math.inf, 0.0)
OVERFLOW_SNAP = 1e150

ROW_SUM_TOL = 1e-12
MAP_EQ_TOL = 1e-12


def is_infinity(z: complex) -> bool:
    return not (math.isfinite(z.real) and math.isfinite(z.imag))


def chordal_distance(a: complex, b: complex) -> float:
    """Chordal metric on the sphere: 2|a-b| / sqrt((1+|a|^2)(1+|b|^2)).

    Range [0, 2]; d(z, infinity) -> 0 as |z| grows.
    """
    a_inf = is_infinity(a)
    b_inf = is_infinity(b)
    if a_inf and b_inf:
        return 0.0
    if a_inf or b_inf:
        w = b if a_inf else a
        return 2.0 / math.sqrt(1.0 + abs(w) ** 2)
    return 2.0 * abs(a - b) / math.sqrt((1.0 + abs(a) ** 2) * (1.0 + abs(b) ** 2))


@dataclass(frozen=True)
class Polynomial:
    """Complex polynomial, coefficients ascending (coeffs[k] multiplies z^k)."""

    coeffs: tuple[complex, ...]

    def __post_init__(self):
        if len(self.coeffs) == 0:
            raise ValueError("empty coefficient list")
        object.__setattr__(self, "coeffs", tuple(complex(c) for c in self.coeffs))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, z: complex) -> complex:
        if is_infinity(z):
            return INFINITY
        acc = 0j
        for c in reversed(self.coeffs):
            acc = acc * z + c
            if abs(acc) > OVERFLOW_SNAP:
                return INFINITY
        return acc

    def eval_array(self, z: np.ndarray) -> np.ndarray:
        """Horner over an array; entries past OVERFLOW_SNAP snap to inf.

        The snap happens per Horner step so complex overflow can never turn
        into NaN (inf*z + c would otherwise produce inf-inf terms).
        """
        acc = np.zeros_like(z, dtype=np.complex128)
        for c in reversed(self.coeffs):
            acc = acc * z + c
            big = ~(np.abs(acc) <= OVERFLOW_SNAP)  # catches NaN too
            if big.any():
                acc[big] = INFINITY
        return acc

    def derivative(self) -> "Polynomial":
        if self.degree == 0:
            return Polynomial((0j,))
        return Polynomial(tuple((k + 1) * c for k, c in enumerate(self.coeffs[1:])))

    def compose(self, inner: "Polynomial") -> "Polynomial":
        """Coefficients of self(inner(z)), expanded by Horner on coefficient
        vectors: result = ((a_d * g + a_{d-1}) * g + ...) * g + a_0."""
        g = np.asarray(inner.coeffs, dtype=np.complex128)
        acc = np.asarray([self.coeffs[-1]], dtype=np.complex128)
        for c in reversed(self.coeffs[:-1]):
            acc = np.convolve(acc, g)
            acc[0] += c
        return Polynomial(tuple(acc))

    def __repr__(self):
        return f"Polynomial(degree={self.degree})"


@dataclass(frozen=True)
class EdgeMeasure:
    """Edge (src -> dst) carrying (map, weight) atoms, weights > 0."""

    src: int  # 1-based
    dst: int  # 1-based
    atoms: tuple[tuple[Polynomial, float], ...]

    @property
    def total_weight(self) -> float:
        return float(sum(w for _, w in self.atoms))


@dataclass(frozen=True)
class System:
    """Validated system: vertex count, edges, row-stochastic edge matrix P.

    Parallel edges (same src and dst) are allowed and keep their identity.
    out_atoms[i] lists (dst 1-based, weight, Polynomial, edge index into
    `edges`) for vertex i+1 in a fixed deterministic order (edges sorted by
    (src, dst) with config order breaking ties, atoms in config order);
    in_atoms is the transpose view for backward orbits.
    """

    m: int
    edges: tuple[EdgeMeasure, ...]
    window: tuple[float, float, float, float] | None = None
    P: np.ndarray = field(init=False, repr=False, compare=False)
    out_atoms: tuple[tuple[tuple[int, float, Polynomial, int], ...], ...] = field(
        init=False, repr=False, compare=False
    )
    in_atoms: tuple[tuple[tuple[int, float, Polynomial, int], ...], ...] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self):
        P = np.zeros((self.m, self.m))
        outs: list[list[tuple[int, float, Polynomial, int]]] = [[] for _ in range(self.m)]
        ins: list[list[tuple[int, float, Polynomial, int]]] = [[] for _ in range(self.m)]
        order = sorted(enumerate(self.edges), key=lambda t: (t[1].src, t[1].dst, t[0]))
        for eidx, e in order:
            P[e.src - 1, e.dst - 1] += e.total_weight
            for poly, w in e.atoms:
                outs[e.src - 1].append((e.dst, w, poly, eidx))
                ins[e.dst - 1].append((e.src, w, poly, eidx))
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "out_atoms", tuple(tuple(o) for o in outs))
        object.__setattr__(self, "in_atoms", tuple(tuple(i) for i in ins))

    def atom_polys(self) -> list[Polynomial]:
        return [poly for e in self.edges for poly, _ in e.atoms]


# ---------------------------------------------------------------------------
# config parsing / serialization


def _as_complex_pair(item) -> complex:
    if (
        not isinstance(item, list)
        or len(item) != 2
        or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in item)
    ):
        raise SchemaError(f"coefficient must be a [re, im] pair, got {item!r}")
    return complex(float(item[0]), float(item[1]))


def _parse_atom(raw: dict) -> tuple[Polynomial, float]:
    if not isinstance(raw, dict):
        raise SchemaError("atom must be a table")
    unknown = set(raw) - {"weight", "coeffs"}
    if unknown:
        raise SchemaError(f"unknown atom keys {sorted(unknown)}")
    if "weight" not in raw or "coeffs" not in raw:
        raise SchemaError("atom needs 'weight' and 'coeffs'")
    w = raw["weight"]
    if isinstance(w, bool) or not isinstance(w, (int, float)):
        raise SchemaError(f"weight must be a number, got {w!r}")
    w = float(w)
    if w <= 0.0:
        raise WeightError(f"atom weight must be positive, got {w}")
    coeffs_raw = raw["coeffs"]
    if not isinstance(coeffs_raw, list) or not coeffs_raw:
        raise SchemaError("coeffs must be a non-empty list of [re, im] pairs")
    coeffs = tuple(_as_complex_pair(c) for c in coeffs_raw)
    poly = Polynomial(coeffs)
    if poly.degree < 2:
        raise DegreeError(f"atom map degree {poly.degree} < 2")
    if poly.coeffs[-1] == 0:
        raise DegreeError("leading coefficient is zero")
    return poly, w


def parse_system(config_text: str) -> System:
    """Parse and validate a system config (TOML-shaped text).

    Raises SchemaError / WeightError / DegreeError / StochasticityError.
    """
    try:
        doc = tomli.loads(config_text)
    except tomli.TOMLDecodeError as exc:
        raise SchemaError(f"unparseable config: {exc}") from exc

    unknown = set(doc) - {"vertices", "window", "edge"}
    if unknown:
        raise SchemaError(f"unknown top-level keys {sorted(unknown)}")
    m = doc.get("vertices")
    if isinstance(m, bool) or not isinstance(m, int) or m < 1:
        raise SchemaError(f"'vertices' must be a positive integer, got {m!r}")

    window = None
    if "window" in doc:
        wraw = doc["window"]
        if (
            not isinstance(wraw, list)
            or len(wraw) != 4
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in wraw)
        ):
            raise SchemaError("'window' must be [x0, x1, y0, y1]")
        window = tuple(float(x) for x in wraw)
        if not (window[0] < window[1] and window[2] < window[3]):
            raise SchemaError("'window' bounds must be increasing")

    edges_raw = doc.get("edge")
    if not isinstance(edges_raw, list) or not edges_raw:
        raise SchemaError("config needs at least one [[edge]] block")

    edges = []
    for raw in edges_raw:
        if not isinstance(raw, dict):
            raise SchemaError("edge must be a table")
        unknown = set(raw) - {"from", "to", "atom"}
        if unknown:
            raise SchemaError(f"unknown edge keys {sorted(unknown)}")
        try:
            src, dst = raw["from"], raw["to"]
        except KeyError as exc:
            raise SchemaError(f"edge missing key {exc}") from exc
        for v in (src, dst):
            if isinstance(v, bool) or not isinstance(v, int) or not (1 <= v <= m):
                raise SchemaError(f"edge vertex {v!r} outside 1..{m}")
        # parallel edges (same src, dst) are legal and keep separate identity
        atoms_raw = raw.get("atom")
        if not isinstance(atoms_raw, list) or not atoms_raw:
            raise SchemaError(f"edge ({src},{dst}) needs at least one [[edge.atom]]")
        atoms = tuple(_parse_atom(a) for a in atoms_raw)
        edges.append(EdgeMeasure(src, dst, atoms))

    sums = np.zeros(m)
    for e in edges:
        sums[e.src - 1] += e.total_weight
    bad = np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)[0]
    if bad.size:
        i = int(bad[0]) + 1
        raise StochasticityError(
            f"outgoing weights at vertex {i} sum to {sums[i - 1]!r}, expected 1"
        )

    return System(m=m, edges=tuple(edges), window=window)


def _fmt(x: float) -> str:
    # 17 significant digits round-trip float64 exactly
    s = format(float(x), ".17g")
    return s


def serialize_system(s: System) -> str:
    lines = [f"vertices = {s.m}"]
    if s.window is not None:
        lines.append("window = [" + ", ".join(_fmt(x) for x in s.window) + "]")
    for e in sorted(s.edges, key=lambda e: (e.src, e.dst)):
        lines.append("")
        lines.append("[[edge]]")
        lines.append(f"from = {e.src}")
        lines.append(f"to = {e.dst}")
        for poly, w in e.atoms:
            lines.append("")
            lines.append("[[edge.atom]]")
            lines.append(f"weight = {_fmt(w)}")
            pairs = ", ".join(f"[{_fmt(c.real)}, {_fmt(c.imag)}]" for c in poly.coeffs)
            lines.append(f"coeffs = [{pairs}]")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# graph structure


def is_irreducible(s: System) -> bool:
    """True iff the edge graph is strongly connected."""
    adj = [[] for _ in range(s.m)]
    radj = [[] for _ in range(s.m)]
    for e in s.edges:
        adj[e.src - 1].append(e.dst - 1)
        radj[e.dst - 1].append(e.src - 1)

    def reaches_all(start: int, graph) -> bool:
        seen = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for w in graph[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == s.m

    return reaches_all(0, adj) and reaches_all(0, radj)


def stationary_vector(s: System, tol: float = 1e-12) -> np.ndarray:
    """Left fixed vector p of P (pP = p, sum 1, all entries > 0).

    Direct solve for small m; power iteration with running (Cesaro) averages
    otherwise, which converges for periodic irreducible chains too.
    """
    if not is_irreducible(s):
        raise NotIrreducible("stationary vector needs a strongly connected graph")
    P = s.P
    m = s.m
    if m <= 16:
        A = P.T - np.eye(m)
        A[-1, :] = 1.0
        b = np.zeros(m)
        b[-1] = 1.0
        p = np.linalg.solve(A, b)
    else:
        x = np.full(m, 1.0 / m)
        avg = x.copy()
        p = None
        for n in range(1, 100001):
            x = x @ P
            avg += (x - avg) / (n + 1)
            if np.max(np.abs(avg @ P - avg)) <= tol:
                p = avg
                break
        if p is None:
            raise NoConvergence("stationary power iteration budget exhausted")
        p = p / p.sum()
    resid = float(np.max(np.abs(p @ P - p)))
    if resid > tol or (p <= 0).any():
        raise NoConvergence(f"stationary vector residual {resid:.3e} exceeds {tol:.1e}")
    return p


def _maps_equal(f: Polynomial, g: Polynomial, tol: float = MAP_EQ_TOL) -> bool:
    if f.degree != g.degree:
        return False
    return all(abs(a - b) <= tol for a, b in zip(f.coeffs, g.coeffs))


def is_essentially_nondeterministic(s: System) -> bool:
    """True iff some vertex has two outgoing (edge, atom) choices that differ
    in edge identity or in map (coefficientwise, tolerance 1e-12)."""
    for i in range(s.m):
        choices = s.out_atoms[i]
        for a in range(len(choices)):
            for b in range(a + 1, len(choices)):
                _, _, fa, ea = choices[a]
                _, _, fb, eb = choices[b]
                if ea != eb or not _maps_equal(fa, fb):
                    return True
        # two identical atoms listed twice on one edge differ in neither
        # edge nor map, so they do not qualify as distinct choices.
    return False


def escape_radius(s: System) -> float:
    """R with |f(z)| >= 2|z| for every atom f once |z| >= R.

    Per atom: max(1, (2 + sum_{k<d}|a_k|) / |a_d|); take the max over atoms.
    Then |f(z)| >= |z|^d |a_d| - sum |a_k| |z|^k >= |z|^{d-1}(|a_d||z| -
    sum|a_k|) >= 2|z| whenever |z| >= R and d >= 2.
    """
    R = 1.0
    for poly in s.atom_polys():
        lead = abs(poly.coeffs[-1])
        rest = sum(abs(c) for c in poly.coeffs[:-1])
        R = max(R, (2.0 + rest) / lead)
    return R
