"""Julia-set geometry and structural checkers.

Backward random orbits render the per-vertex Julia sets; repelling fixed
points of loop-word compositions seed them and cross-check them; the branch
tree answers membership in the smallest filled set; pullback-separation and
kernel-emptiness checkers certify the structural conditions the stability
results need; the non-constancy mask ties the probability field back to the
rendered sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import DeadEnd, NoConvergence, NotIrreducible
from .grid import GridField, complex_grid
from .model import Polynomial, System, _maps_equal, escape_radius, is_infinity
from .model import is_essentially_nondeterministic, is_irreducible
from .roots import aberth_all

SEED_PREIMAGE_LEVELS = 3  # backward levels inspected by the seed guard
SEED_MIN_PREIMAGES = 3  # fewer distinct preimages disqualifies a seed
CONTACT_EPS = 1e-6  # numerical-contact threshold for violation verdicts
DEFAULT_MIN_MARGIN = 1e-3


@dataclass(frozen=True)
class PointCloud:
    vertex: int
    points: np.ndarray  # complex128
    gen: np.ndarray  # backward depth at which each point was collected

    def __len__(self):
        return int(self.points.shape[0])


@dataclass(frozen=True)
class RepellingPoint:
    location: complex
    multiplier_modulus: float
    word: tuple[tuple[int, int], ...]  # (edge index, atom index) steps


# ----------------------------------------------------- nearest neighbours


class _Buckets:
    """Uniform-cell spatial hash over a fixed point set (no third-party
    trees; query cost is a scan of the 3x3 cell neighbourhood, widened in
    rings until a candidate shows up)."""

    def __init__(self, pts: np.ndarray, cell: float):
        self.pts = pts
        self.cell = cell
        ix = np.floor(pts.real / cell).astype(np.int64)
        iy = np.floor(pts.imag / cell).astype(np.int64)
        # sort by the packed key itself so start/end offsets line up
        key = (ix << 32) ^ (iy & 0xFFFFFFFF)
        order = np.argsort(key, kind="stable")
        self.order = order
        sk = key[order]
        starts = np.nonzero(np.r_[True, sk[1:] != sk[:-1]])[0]
        self.cell_key = sk[starts]
        self.cell_start = starts
        self.cell_end = np.append(starts[1:], sk.shape[0])

    def _cell_slice(self, cx: int, cy: int):
        key = (cx << 32) ^ (cy & 0xFFFFFFFF)
        j = np.searchsorted(self.cell_key, key)
        if j < self.cell_key.shape[0] and self.cell_key[j] == key:
            return self.order[self.cell_start[j] : self.cell_end[j]]
        return None

    def ring_candidates(self, cx: int, cy: int, r: int):
        """Point indices in the square ring of cell radius r around (cx, cy)."""
        chunks = []
        if r == 0:
            sl = self._cell_slice(cx, cy)
            return [sl] if sl is not None else []
        for dx in range(-r, r + 1):
            for dy in (-r, r):
                sl = self._cell_slice(cx + dx, cy + dy)
                if sl is not None:
                    chunks.append(sl)
        for dy in range(-r + 1, r):
            for dx in (-r, r):
                sl = self._cell_slice(cx + dx, cy + dy)
                if sl is not None:
                    chunks.append(sl)
        return chunks


def nn_dists(a: np.ndarray, b: np.ndarray, cell: float | None = None) -> np.ndarray:
    """For every point of a: chordal-free plane distance to the nearest
    point of b. Exact (the ring search only stops once no farther ring can
    hold a closer point)."""
    a = np.asarray(a, dtype=np.complex128).ravel()
    b = np.asarray(b, dtype=np.complex128).ravel()
    if b.size == 0:
        raise ValueError("empty reference set")
    if cell is None:
        span = max(
            b.real.max() - b.real.min(), b.imag.max() - b.imag.min(), 1e-9
        )
        cell = max(span / max(np.sqrt(b.size / 2.0), 1.0), 1e-12)
    bk = _Buckets(b, cell)
    out = np.empty(a.shape[0])
    # group queries by cell so each occupied cell is processed once
    ax = np.floor(a.real / cell).astype(np.int64)
    ay = np.floor(a.imag / cell).astype(np.int64)
    akey = (ax << 32) ^ (ay & 0xFFFFFFFF)
    order = np.argsort(akey, kind="stable")
    sorted_key = akey[order]
    group_starts = np.nonzero(np.r_[True, sorted_key[1:] != sorted_key[:-1]])[0]
    group_ends = np.append(group_starts[1:], a.shape[0])
    for g0, g1 in zip(group_starts, group_ends):
        idx = order[g0:g1]
        pts = a[idx]
        cx, cy = int(ax[idx[0]]), int(ay[idx[0]])
        best = np.full(pts.shape[0], np.inf)
        r = 0
        while True:
            chunks = bk.ring_candidates(cx, cy, r)
            if chunks:
                cand = b[np.concatenate(chunks)]
                d = np.abs(pts[:, None] - cand[None, :]).min(axis=1)
                np.minimum(best, d, out=best)
            # any point of ring r+1 is at least r*cell away from this cell
            if np.isfinite(best).all() and best.max() <= r * cell:
                break
            r += 1
        out[idx] = best
    return out


def nn_min_distance(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """Smallest pairwise distance between the two sets and the index into a
    realizing it. One 3x3-cell pass settles every point whose neighbourhood
    holds a candidate; the rest only widen while they could still beat the
    running best."""
    a = np.asarray(a, dtype=np.complex128).ravel()
    b = np.asarray(b, dtype=np.complex128).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty point set")
    span = max(b.real.max() - b.real.min(), b.imag.max() - b.imag.min(), 1e-9)
    cell = max(span / max(np.sqrt(b.size / 2.0), 1.0), 1e-12)
    bk = _Buckets(b, cell)
    ax = np.floor(a.real / cell).astype(np.int64)
    ay = np.floor(a.imag / cell).astype(np.int64)
    akey = (ax << 32) ^ (ay & 0xFFFFFFFF)
    order = np.argsort(akey, kind="stable")
    sorted_key = akey[order]
    group_starts = np.nonzero(np.r_[True, sorted_key[1:] != sorted_key[:-1]])[0]
    group_ends = np.append(group_starts[1:], a.shape[0])
    best = np.inf
    best_idx = 0
    for g0, g1 in zip(group_starts, group_ends):
        idx = order[g0:g1]
        pts = a[idx]
        cx, cy = int(ax[idx[0]]), int(ay[idx[0]])
        local = np.inf
        local_idx = 0
        r = 0
        # ring r+1 holds nothing closer than r*cell, so stop once neither
        # this group's own minimum nor the global best can improve
        while (r - 1) * cell < min(local, best):
            chunks = bk.ring_candidates(cx, cy, r)
            if chunks:
                cand = b[np.concatenate(chunks)]
                d = np.abs(pts[:, None] - cand[None, :]).min(axis=1)
                k = int(np.argmin(d))
                if d[k] < local:
                    local = float(d[k])
                    local_idx = int(idx[k])
            r += 1
        if local < best:
            best = local
            best_idx = local_idx
    return best, best_idx


# ------------------------------------------------------- backward orbits


def _in_choice_tables(s: System):
    """Per-vertex incoming (edge, atom) choice tables with cumulative
    weights normalized over the incoming mass."""
    tables = []
    for j in range(s.m):
        entries = s.in_atoms[j]
        if entries:
            w = np.array([t[1] for t in entries])
            cum = np.cumsum(w / w.sum())
            cum[-1] = 2.0
        else:
            cum = np.empty(0)
        tables.append((entries, cum))
    return tables


def _distinct_preimage_count(
    s: System, z: complex, vertex: int, levels: int = SEED_PREIMAGE_LEVELS
) -> int:
    """Distinct backward images of (z, vertex) accumulated over a few levels
    (1e-9 merge tolerance). Small counts flag degenerate seeds."""
    frontier = [(complex(z), vertex)]
    seen: set[tuple[int, int, int]] = set()
    for _ in range(levels):
        nxt = []
        for val, j in frontier:
            for src, _w, poly, _e in s.in_atoms[j - 1]:
                rts, ok = aberth_all(poly.coeffs, np.array([val]))
                if not ok[0]:
                    continue
                for w in rts[0]:
                    key = (src, int(round(w.real * 1e9)), int(round(w.imag * 1e9)))
                    if key not in seen:
                        seen.add(key)
                        nxt.append((complex(w), src))
        frontier = nxt
        if len(seen) >= SEED_MIN_PREIMAGES:
            break
    return len(seen)


def _seed_candidates(s: System, vertex: int, seed: int):
    """Deterministic ordered seed candidates: repelling points of short
    loops at the vertex, then coarse probes below the escape radius."""
    cands: list[complex] = []
    try:
        reps = repelling_fixed_points(s, vertex, max_word_len=2)
    except NoConvergence:
        reps = []
    cands.extend(r.location for r in reps)
    R = escape_radius(s)
    gen = rng.stream(seed, 0x5EED)
    for _ in range(8):
        u = gen.random(2)
        cands.append(complex((2 * u[0] - 1) * R * 0.9, (2 * u[1] - 1) * R * 0.9))
    return cands


def _cell_keys(pts: np.ndarray, cell: float) -> np.ndarray:
    ix = np.floor(pts.real / cell).astype(np.int64)
    iy = np.floor(pts.imag / cell).astype(np.int64)
    return (ix << 32) ^ (iy & 0xFFFFFFFF)


def _first_per_cell(pts: np.ndarray, cell: float) -> np.ndarray:
    """Indices (ascending) of the earliest point in each occupied cell."""
    if pts.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    key = _cell_keys(pts, cell)
    order = np.argsort(key, kind="stable")
    sk = key[order]
    first = np.r_[True, sk[1:] != sk[:-1]]
    return np.sort(order[first])


def _walk_phase(
    s: System,
    start_vertex: int,
    z0: complex,
    quota: int,
    burn_in: int,
    seed: int,
    n_chains: int,
    max_rounds: int,
):
    """Random backward walk collecting up to `quota` visits at every vertex.

    Chains pick an incoming (edge, atom) weighted by atom weight, solve
    f(w) = z and jump to a uniformly chosen root at the edge's source
    vertex. Visits are recorded in (round, chain) order past burn-in.
    """
    tables = _in_choice_tables(s)
    gens = [rng.stream(seed, 1 + c) for c in range(n_chains)]
    vals = np.full(n_chains, complex(z0), dtype=np.complex128)
    vtx = np.full(n_chains, start_vertex, dtype=np.int64)
    collected: dict[int, list[np.ndarray]] = {v: [] for v in range(1, s.m + 1)}
    stamps: dict[int, list[np.ndarray]] = {v: [] for v in range(1, s.m + 1)}
    totals = {v: 0 for v in range(1, s.m + 1)}
    draws = [g.random((256, 2)) for g in gens]
    for rnd in range(max_rounds):
        slot = rnd % 256
        if rnd and slot == 0:
            draws = [g.random((256, 2)) for g in gens]
        pick = np.empty(n_chains, dtype=np.int64)
        for c in range(n_chains):
            entries, cum = tables[vtx[c] - 1]
            if not entries:
                raise DeadEnd(f"vertex {int(vtx[c])} has no incoming edge")
            pick[c] = np.searchsorted(cum, draws[c][slot, 0], side="right")
        new_vals = np.empty_like(vals)
        new_vtx = np.empty_like(vtx)
        group_key = vtx * 64 + pick
        for key in np.unique(group_key):
            sel = np.nonzero(group_key == key)[0]
            j = int(vtx[sel[0]])
            src, _w, poly, _e = s.in_atoms[j - 1][int(pick[sel[0]])]
            rts, ok = aberth_all(poly.coeffs, vals[sel])
            if not ok.all():
                raise NoConvergence(f"backward root solve stalled at vertex {j}")
            d = rts.shape[1]
            u = np.array([draws[c][slot, 1] for c in sel])
            ridx = np.minimum((u * d).astype(np.int64), d - 1)
            new_vals[sel] = rts[np.arange(sel.shape[0]), ridx]
            new_vtx[sel] = src
        vals, vtx = new_vals, new_vtx
        if rnd + 1 > burn_in:
            for v in range(1, s.m + 1):
                if totals[v] >= quota:
                    continue
                here = vtx == v
                if here.any():
                    got = vals[here]
                    collected[v].append(got)
                    stamps[v].append(np.full(got.shape[0], rnd + 1, dtype=np.int64))
                    totals[v] += got.shape[0]
            if all(t >= quota for t in totals.values()):
                break
    short = [v for v, t in totals.items() if t < quota]
    if short:
        raise NoConvergence(
            f"walk collected under {quota} points at vertices {short} "
            f"in {max_rounds} rounds"
        )
    pts = {v: np.concatenate(collected[v])[:quota] for v in collected}
    gen = {v: np.concatenate(stamps[v])[:quota] for v in stamps}
    for v in pts:
        if not np.isfinite(pts[v]).all():
            raise NoConvergence("backward orbit produced a non-finite point")
    return pts, gen


def _coverage_refine(
    s: System,
    pts: dict[int, np.ndarray],
    gen: dict[int, np.ndarray],
    n_points: int,
    level_round_cap: int = 64,
    max_levels: int = 48,
    extra_levels: int = 1,
):
    """Breadth-first backward completion of the walk output.

    At a fixed cell size, repeatedly pull every vertex cloud back through
    each distinct outgoing (target, map) choice and adopt one representative
    per newly touched cell; once no cell is gained anywhere the scale is
    stable, and the cell is halved until every vertex holds n_points. Each
    adopted point is an exact admissible-word preimage of a walk point, so
    the sets never leave the Julia sets; the cell sweep only fixes the
    coverage that the walk's visit distribution leaves thin.
    """
    verts = list(range(1, s.m + 1))
    choices: dict[int, list] = {v: [] for v in verts}
    for v in verts:
        seen = set()
        for dst, _w, poly, _e in s.out_atoms[v - 1]:
            k = (dst, poly.coeffs)
            if k not in seen:
                seen.add(k)
                choices[v].append((dst, poly))
    every = np.concatenate([pts[v] for v in verts if pts[v].size])
    spread = max(np.ptp(every.real), np.ptp(every.imag), 1e-6)
    cell = spread / 64.0
    tag = 1_000_000
    bonus = 0
    for _level in range(max_levels):
        occ: dict[int, np.ndarray] = {}
        for v in verts:
            keep = _first_per_cell(pts[v], cell)
            pts[v] = pts[v][keep]
            gen[v] = gen[v][keep]
            occ[v] = np.sort(_cell_keys(pts[v], cell))
        solved = {(v, k): 0 for v in verts for k in range(len(choices[v]))}
        stable = False
        for _round in range(level_round_cap):
            grew = False
            for v in verts:
                parts = []
                for k, (dst, poly) in enumerate(choices[v]):
                    src = pts[dst]
                    a = solved[(v, k)]
                    if a >= src.shape[0]:
                        continue
                    rts, ok = aberth_all(poly.coeffs, src[a:])
                    if not ok.all():
                        raise NoConvergence("coverage pullback solve stalled")
                    solved[(v, k)] = src.shape[0]
                    parts.append(rts.ravel())
                if not parts:
                    continue
                cand = np.concatenate(parts)
                ck = _cell_keys(cand, cell)
                order = np.argsort(ck, kind="stable")
                sk = ck[order]
                first = np.r_[True, sk[1:] != sk[:-1]]
                cand_idx = order[first]
                cand_key = sk[first]
                fresh = ~np.isin(cand_key, occ[v], assume_unique=True)
                if fresh.any():
                    add = cand[cand_idx[fresh]]
                    pts[v] = np.concatenate([pts[v], add])
                    gen[v] = np.concatenate(
                        [gen[v], np.full(add.shape[0], tag, dtype=np.int64)]
                    )
                    occ[v] = np.union1d(occ[v], cand_key[fresh])
                    grew = True
            tag += 1
            if not grew:
                stable = True
                break
        if not stable:
            raise NoConvergence("coverage refinement failed to stabilize")
        if min(pts[v].shape[0] for v in verts) >= n_points:
            # one sharpening level past the count target tightens coverage
            # below the trim granularity
            if bonus >= extra_levels:
                return pts, gen, cell
            bonus += 1
        cell *= 0.5
    raise NoConvergence("coverage refinement exhausted its scale levels")


def _thin_spatial(pts: np.ndarray, gen: np.ndarray, n: int, cell: float):
    """Deterministic trim to exactly n points: keep one per cell at the
    coarsest doubling of `cell` that fits inside n, then top the count up
    with leftovers strided in cell-sorted order."""
    if pts.shape[0] <= n:
        return pts, gen
    c = cell
    while True:
        keep = _first_per_cell(pts, c)
        if keep.shape[0] <= n:
            break
        c *= 2.0
    if keep.shape[0] < n:
        mask = np.ones(pts.shape[0], dtype=bool)
        mask[keep] = False
        rest = np.nonzero(mask)[0]
        rest = rest[np.argsort(_cell_keys(pts[rest], cell), kind="stable")]
        need = n - keep.shape[0]
        extra = rest[(np.arange(need, dtype=np.int64) * rest.shape[0]) // need]
        keep = np.sort(np.concatenate([keep, extra]))
    return pts[keep], gen[keep]


def julia_clouds(
    s: System,
    n_points: int,
    burn_in: int = 50,
    seed: int = 0,
    n_chains: int = 64,
    max_rounds: int = 200_000,
    seed_vertex: int | None = None,
) -> dict[int, PointCloud]:
    """Julia-set point clouds for every vertex, n_points each.

    Two deterministic stages: a random backward walk seeded at a repelling
    point (visit measure concentrates where the sets are thick), then a
    breadth-first pullback sweep that adopts one exact preimage per
    uncovered cell until every vertex reaches n_points at a uniform scale.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not is_irreducible(s):
        raise NotIrreducible("cloud rendering needs a strongly connected graph")
    sv = 1 if seed_vertex is None else seed_vertex
    if not (1 <= sv <= s.m):
        raise ValueError(f"vertex {sv} outside 1..{s.m}")
    if not s.in_atoms[sv - 1]:
        raise DeadEnd(f"vertex {sv} has no incoming edge")
    z0 = None
    for cand in _seed_candidates(s, sv, seed):
        if _distinct_preimage_count(s, cand, sv) >= SEED_MIN_PREIMAGES:
            z0 = cand
            break
    if z0 is None:
        raise NoConvergence("no backward seed with enough distinct preimages")
    quota = min(n_points, max(512, n_points // 8))
    pts, gen = _walk_phase(s, sv, z0, quota, burn_in, seed, n_chains, max_rounds)
    pts, gen, cell = _coverage_refine(s, pts, gen, n_points)
    out = {}
    for v in range(1, s.m + 1):
        p, g = _thin_spatial(pts[v], gen[v], n_points, cell)
        out[v] = PointCloud(v, p, g)
    return out


def backward_orbit_cloud(
    s: System,
    target_vertex: int,
    n_points: int,
    burn_in: int = 50,
    seed: int = 0,
    n_chains: int = 64,
    max_rounds: int = 200_000,
) -> PointCloud:
    """Backward-orbit rendering of the Julia set at target_vertex: the
    random walk of julia_clouds seeded at this vertex, completed by the
    cell-coverage sweep, trimmed to exactly n_points."""
    if not (1 <= target_vertex <= s.m):
        raise ValueError(f"vertex {target_vertex} outside 1..{s.m}")
    if not s.in_atoms[target_vertex - 1]:
        raise DeadEnd(f"vertex {target_vertex} has no incoming edge")
    clouds = julia_clouds(
        s,
        n_points,
        burn_in=burn_in,
        seed=seed,
        n_chains=n_chains,
        max_rounds=max_rounds,
        seed_vertex=target_vertex,
    )
    return clouds[target_vertex]


def cluster_count(cloud: PointCloud, tol: float = 1e-6) -> int:
    """Distinct points at tolerance tol; < 3 hints at a degenerate family."""
    keys = np.unique(np.round(cloud.points / tol).view(np.float64).reshape(-1, 2), axis=0)
    return int(keys.shape[0])


# --------------------------------------------------- repelling loop words


def _loops_at_vertex(s: System, vertex: int, max_len: int):
    """All admissible (edge, atom) words of length <= max_len that start and
    end at `vertex`, in deterministic DFS order."""
    loops: list[tuple[tuple[int, int], ...]] = []

    def grow(cur_vertex: int, word: tuple[tuple[int, int], ...]):
        if len(word) >= 1 and cur_vertex == vertex:
            loops.append(word)
        if len(word) >= max_len:
            return
        for eidx, e in enumerate(s.edges):
            if e.src != cur_vertex:
                continue
            for k in range(len(e.atoms)):
                grow(e.dst, word + ((eidx, k),))

    grow(vertex, ())
    return loops


def _word_eval(s: System, word, z: complex) -> tuple[complex, complex]:
    """(h(z), h'(z)) for the composed word via the chain rule (factored,
    numerically stable for long words)."""
    val = complex(z)
    der = complex(1.0)
    for eidx, k in word:
        poly = s.edges[eidx].atoms[k][0]
        der *= poly.derivative()(val)
        val = poly(val)
    return val, der


def repelling_fixed_points(
    s: System,
    vertex: int,
    max_word_len: int = 3,
    n_words: int = 0,
    seed: int = 0,
) -> list[RepellingPoint]:
    """Repelling fixed points of admissible loop compositions at a vertex.

    Solves h(z) = z per loop word h (all loops up to max_word_len, or a
    deterministic sample of n_words of them), polishes each root with Newton
    on the factored composition, and keeps |h'(z)| > 1 + 1e-9.
    """
    loops = _loops_at_vertex(s, vertex, max_word_len)
    if not loops:
        return []
    if n_words and len(loops) > n_words:
        gen = rng.stream(seed, 0)
        keep = gen.choice(len(loops), size=n_words, replace=False)
        loops = [loops[int(i)] for i in sorted(keep)]

    found: list[RepellingPoint] = []
    for word in loops:
        h = s.edges[word[0][0]].atoms[word[0][1]][0]
        for eidx, k in word[1:]:
            h = s.edges[eidx].atoms[k][0].compose(h)
        coeffs = list(h.coeffs)
        while len(coeffs) < 2:
            coeffs.append(0j)
        coeffs[1] -= 1.0  # roots of h(z) - z
        rts, _ok = aberth_all(np.asarray(coeffs), np.array([0j]))
        for w in rts[0]:
            z = complex(w)
            for _ in range(40):  # Newton polish on the factored word
                val, der = _word_eval(s, word, z)
                g = val - z
                gp = der - 1.0
                if abs(g) <= 1e-12 * (1.0 + abs(z)) or abs(gp) < 1e-300:
                    break
                z = z - g / gp
            val, der = _word_eval(s, word, z)
            if not np.isfinite(z) or abs(val - z) > 1e-8 * (1.0 + abs(z)):
                continue
            if abs(der) > 1.0 + 1e-9:
                found.append(RepellingPoint(z, float(abs(der)), word))

    # dedupe per word: polished roots of multiplicity collapse together
    out: list[RepellingPoint] = []
    for rp in sorted(
        found, key=lambda r: (len(r.word), r.word, r.location.real, r.location.imag)
    ):
        if any(
            rp.word == q.word and abs(rp.location - q.location) <= 1e-9
            for q in out
        ):
            continue
        out.append(rp)
    return out


# -------------------------------------------------- filled-set membership


@dataclass(frozen=True)
class Membership:
    verdict: str  # CERTIFIED_OUT | UNRESOLVED_IN
    escape_depth: int | None
    budget_exceeded: bool = False


def filled_set_membership(
    s: System, z: complex, i: int, max_depth: int, node_budget: int = 10_000_000
) -> Membership:
    """CERTIFIED_OUT iff some admissible word of length <= max_depth drives z
    past the escape radius (exact exclusion from the smallest filled set);
    UNRESOLVED_IN otherwise. Weights are irrelevant here, so states merge on
    (vertex, value) alone."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    R = escape_radius(s)
    if is_infinity(z) or abs(z) >= R:
        return Membership("CERTIFIED_OUT", 0)
    vals = np.array([complex(z)], dtype=np.complex128)
    vtx = np.array([i - 1], dtype=np.int8)
    nodes = 0
    for level in range(1, max_depth + 1):
        cv, cx = [], []
        for v in range(s.m):
            sel = vtx == v
            if not sel.any():
                continue
            sv = vals[sel]
            for dst, _w, poly, _e in s.out_atoms[v]:
                cv.append(poly.eval_array(sv.copy()))
                cx.append(np.full(sv.shape, dst - 1, dtype=np.int8))
        vals = np.concatenate(cv)
        vtx = np.concatenate(cx)
        nodes += vals.size
        if (~(np.abs(vals) < R)).any():
            return Membership("CERTIFIED_OUT", level)
        rec = np.empty(
            vals.size, dtype=[("v", np.int8), ("re", np.float64), ("im", np.float64)]
        )
        rec["v"], rec["re"], rec["im"] = vtx, vals.real, vals.imag
        uniq = np.unique(rec)
        vals = (uniq["re"] + 1j * uniq["im"]).astype(np.complex128)
        vtx = uniq["v"].copy()
        if nodes >= node_budget:
            return Membership("UNRESOLVED_IN", None, budget_exceeded=True)
    return Membership("UNRESOLVED_IN", None)


# ------------------------------------------------- structural checkers


@dataclass(frozen=True)
class PairMargin:
    vertex: int
    choice_a: tuple[int, int]  # (edge index, atom index)
    choice_b: tuple[int, int]
    distance: float


@dataclass(frozen=True)
class SeparationReport:
    status: str  # SEPARATED | VIOLATED | INCONCLUSIVE
    margin: float  # min distance over qualifying pairs (inf if none)
    pairs: tuple[PairMargin, ...]
    witness: PairMargin | None = None


def _atom_index_in_edge(s: System, eidx: int, poly: Polynomial) -> int:
    for k, (p, _w) in enumerate(s.edges[eidx].atoms):
        if p is poly:
            return k
    raise AssertionError("atom not found on its edge")


def _normalize_clouds(s: System, clouds) -> dict[int, PointCloud]:
    if isinstance(clouds, dict):
        have = clouds
    else:
        have = {c.vertex: c for c in clouds}
    missing = [v for v in range(1, s.m + 1) if v not in have]
    if missing:
        raise ValueError(f"clouds missing for vertices {missing}")
    return have


def check_backward_separating(
    s: System, clouds, min_margin: float = DEFAULT_MIN_MARGIN, max_points: int = 20000
) -> SeparationReport:
    """Pullback-separation verdict from sampled Julia clouds.

    For every vertex and every pair of distinct outgoing (edge, atom)
    choices, pull the target clouds back through the two maps and measure
    the smallest distance between the two preimage clouds. All pairs at or
    above min_margin: SEPARATED. Any pair at or below the numerical-contact
    threshold: VIOLATED (the pair is reported as witness). Anything in
    between: INCONCLUSIVE. The only exempt pairs are two listings of the
    same map on the same edge, which are one choice, not two.
    """
    have = _normalize_clouds(s, clouds)
    memo: dict[tuple[int, tuple], np.ndarray] = {}

    def preimage(poly: Polynomial, target: int) -> np.ndarray:
        key = (target, poly.coeffs)
        if key not in memo:
            pts = have[target].points
            if pts.shape[0] > max_points:
                stride = int(np.ceil(pts.shape[0] / max_points))
                pts = pts[::stride]
            rts, ok = aberth_all(poly.coeffs, pts)
            if not ok.all():
                raise NoConvergence("preimage solve stalled")
            memo[key] = rts.ravel()
        return memo[key]

    pairs: list[PairMargin] = []
    for v in range(s.m):
        choices = s.out_atoms[v]
        for a in range(len(choices)):
            for b in range(a + 1, len(choices)):
                da, _wa, fa, ea = choices[a]
                db, _wb, fb, eb = choices[b]
                if ea == eb and _maps_equal(fa, fb):
                    continue  # same choice listed twice
                pa = preimage(fa, da)
                pb = preimage(fb, db)
                if pa is pb:
                    dist = 0.0  # identical pullback of the identical cloud
                else:
                    dist, _ = nn_min_distance(pa, pb)
                pairs.append(
                    PairMargin(
                        v + 1,
                        (ea, _atom_index_in_edge(s, ea, fa)),
                        (eb, _atom_index_in_edge(s, eb, fb)),
                        dist,
                    )
                )

    if not pairs:
        return SeparationReport("SEPARATED", float("inf"), ())
    worst = min(pairs, key=lambda p: p.distance)
    if worst.distance <= CONTACT_EPS:
        return SeparationReport("VIOLATED", worst.distance, tuple(pairs), worst)
    if worst.distance >= min_margin:
        return SeparationReport("SEPARATED", worst.distance, tuple(pairs))
    return SeparationReport("INCONCLUSIVE", worst.distance, tuple(pairs), worst)


@dataclass(frozen=True)
class KernelReport:
    status: str  # EMPTY_BY_LEMMA | UNKNOWN
    reason: str
    separated_pair: PairMargin | None = None


def check_kernel_empty(
    s: System,
    clouds,
    min_margin: float = DEFAULT_MIN_MARGIN,
    separation: SeparationReport | None = None,
) -> KernelReport:
    """Kernel-emptiness certificate.

    The emptiness argument needs irreducibility, essential non-determinism,
    and one vertex where two genuinely different choices pull the terminal
    sets back to disjoint regions; pullbacks of that gap then sweep every
    vertex. A fully separated family trivially supplies such a pair, but one
    well separated pair suffices even when other pairs overlap, so the
    certificate checks pairs individually. Never claims non-emptiness.
    """
    if not is_irreducible(s):
        return KernelReport("UNKNOWN", "graph is not irreducible")
    if not is_essentially_nondeterministic(s):
        return KernelReport("UNKNOWN", "system is essentially deterministic")
    rep = separation
    if rep is None:
        rep = check_backward_separating(s, clouds, min_margin=min_margin)
    if rep.status == "SEPARATED":
        return KernelReport(
            "EMPTY_BY_LEMMA", "all choice pairs pull back separated", None
        )
    good = [p for p in rep.pairs if p.distance >= min_margin]
    if good:
        best = max(good, key=lambda p: p.distance)
        return KernelReport(
            "EMPTY_BY_LEMMA",
            f"vertex {best.vertex} has a separated choice pair "
            f"(distance {best.distance:.3g})",
            best,
        )
    return KernelReport("UNKNOWN", "no separated choice pair found")


# ----------------------------------------------------------- field masks


def nonconstancy_mask(fld: GridField, threshold: float) -> GridField:
    """1 where the field differs from some 8-neighbour by more than
    threshold: the pixels where the field is visibly not locally constant."""
    v = fld.values
    pad = np.pad(v, 1, mode="edge")
    diff = np.zeros_like(v)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            shifted = pad[1 + dy : 1 + dy + v.shape[0], 1 + dx : 1 + dx + v.shape[1]]
            np.maximum(diff, np.abs(v - shifted), out=diff)
    return GridField(
        fld.window,
        fld.nx,
        fld.ny,
        (diff > threshold).astype(np.float64),
        fld.vertex,
        dict(fld.meta, kind="nonconstancy_mask", threshold=threshold),
    )


def rasterize_cloud(cloud: PointCloud, window, nx: int, ny: int) -> GridField:
    """Single-pixel rasterization; points outside the window are dropped."""
    x0, x1, y0, y1 = window
    x = cloud.points.real
    y = cloud.points.imag
    inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
    cx = ((x[inside] - x0) / (x1 - x0) * nx).astype(np.int64)
    cy = ((y[inside] - y0) / (y1 - y0) * ny).astype(np.int64)
    np.clip(cx, 0, nx - 1, out=cx)
    np.clip(cy, 0, ny - 1, out=cy)
    vals = np.zeros((ny, nx))
    vals[cy, cx] = 1.0
    return GridField(
        tuple(window),
        nx,
        ny,
        vals,
        cloud.vertex,
        {"kind": "julia_cloud_raster", "points": int(cloud.points.shape[0]),
         "dropped": int((~inside).sum())},
    )


# ----------------------------------------------------- self-similarity


def self_similarity_defect(s: System, clouds, max_points: int = 200_000) -> float:
    """Largest two-sided mismatch between each vertex cloud and the union of
    the pullbacks of its targets' clouds. Zero for the exact sets; sampling
    gaps make it small but positive, shrinking as clouds grow."""
    have = _normalize_clouds(s, clouds)
    memo: dict[tuple[int, tuple], np.ndarray] = {}

    def preimage(poly: Polynomial, target: int) -> np.ndarray:
        key = (target, poly.coeffs)
        if key not in memo:
            pts = have[target].points
            if pts.shape[0] > max_points:
                stride = int(np.ceil(pts.shape[0] / max_points))
                pts = pts[::stride]
            rts, ok = aberth_all(poly.coeffs, pts)
            if not ok.all():
                raise NoConvergence("preimage solve stalled")
            memo[key] = rts.ravel()
        return memo[key]

    worst = 0.0
    for v in range(1, s.m + 1):
        parts = []
        seen_keys = set()
        for dst, _w, poly, _e in s.out_atoms[v - 1]:
            key = (dst, poly.coeffs)
            if key in seen_keys:
                continue
            seen_keys.add(key)
            parts.append(preimage(poly, dst))
        union = np.concatenate(parts)
        mine = have[v].points
        d1 = float(nn_dists(mine, union).max())
        d2 = float(nn_dists(union, mine).max())
        worst = max(worst, d1, d2)
    return worst
