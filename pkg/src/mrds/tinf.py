"""Escape-probability fields.

Three independent routes to the same quantity (the probability that the
random orbit of z started at vertex i tends to infinity):

- monte_carlo_T: sample words, count escapes; unbiased for the depth-limited
  escape probability.
- tree_bounds: exhaustive weighted branch tree with escape pruning; returns
  certified [lower, upper] intervals (escape past R is permanent by the
  doubling certificate, so escaped mass counts in both bounds; mass still
  alive at the depth cutoff counts only in the upper bound).
- operator iteration: the one-step averaging operator applied to grid fields
  until a sup-norm fixed point; seeded with a continuous radial ramp that is
  1 far beyond the escape radius.

They share nothing but the System, on purpose: the tests compare them.
"""

from __future__ import annotations

import concurrent.futures as _fut
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import NoConvergence, NotIrreducible
from .grid import AGGREGATE, GridField, complex_grid, crop_center
from .model import System, escape_radius, is_infinity, is_irreducible, stationary_vector

DEFAULT_DEPTH = 24
DEFAULT_NODE_BUDGET = 10_000_000
GRID_NODE_CAP = 2048  # per-pixel cap during grid tree sweeps
ROW_BAND = 32  # rows per independent work unit (fixed; not tied to threads)


@dataclass(frozen=True)
class ProbEstimate:
    mean: float
    stderr: float
    n_samples: int


@dataclass(frozen=True)
class ProbBounds:
    lower: float
    upper: float
    depth: int
    resolved_mass: float
    budget_exceeded: bool = False

    @property
    def width(self) -> float:
        return self.upper - self.lower


# ------------------------------------------------------------- Monte Carlo


def _choice_arrays(s: System):
    """Per-vertex cumulative weights plus flat (dst, poly) choice lists."""
    cum_rows = []
    choices = []
    K = max(len(s.out_atoms[i]) for i in range(s.m))
    for i in range(s.m):
        table = s.out_atoms[i]
        w = np.array([t[1] for t in table])
        cum = np.cumsum(w)
        cum[-1] = 2.0  # final choice absorbs float slack in the row sum
        if K > len(table):
            cum = np.concatenate([cum, np.full(K - len(table), 2.0)])
        cum_rows.append(cum)
        choices.append([(t[0], t[2]) for t in table])
    return np.vstack(cum_rows), choices


def monte_carlo_T(
    s: System,
    z: complex,
    i: int,
    n_samples: int,
    max_steps: int = 200,
    seed: int = 0,
    stream_id: int = 0,
) -> ProbEstimate:
    """Fraction of sampled words whose orbit of z reaches |z| >= R within
    max_steps. Draws come from one stream: (seed, stream_id)."""
    R = escape_radius(s)
    if is_infinity(z) or abs(z) >= R:
        return ProbEstimate(1.0, 0.0, n_samples)
    cum, choices = _choice_arrays(s)
    gen = rng.stream(seed, stream_id)
    vals = np.full(n_samples, complex(z), dtype=np.complex128)
    vtx = np.full(n_samples, i - 1, dtype=np.int64)
    escaped = 0
    for _ in range(max_steps):
        n = vals.shape[0]
        if n == 0:
            break
        u = gen.random(n)
        kidx = np.sum(u[:, None] >= cum[vtx], axis=1)
        new_vals = np.empty_like(vals)
        new_vtx = np.empty_like(vtx)
        for v in range(s.m):
            for k, (dst, poly) in enumerate(choices[v]):
                sel = (vtx == v) & (kidx == k)
                if sel.any():
                    new_vals[sel] = poly.eval_array(vals[sel])
                    new_vtx[sel] = dst - 1
        esc = ~(np.abs(new_vals) < R)
        escaped += int(esc.sum())
        vals = new_vals[~esc]
        vtx = new_vtx[~esc]
    mean = escaped / n_samples
    stderr = float(np.sqrt(mean * (1.0 - mean) / n_samples))
    return ProbEstimate(float(mean), stderr, n_samples)


# ------------------------------------------------------------- branch tree


def tree_bounds(
    s: System,
    z: complex,
    i: int,
    max_depth: int = DEFAULT_DEPTH,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> ProbBounds:
    """Certified interval for the escape probability from (z, vertex i).

    Enumerates the weighted branch tree of admissible words level by level.
    States with bit-identical (value, vertex) merge. A branch that reaches
    |z| >= R contributes its weight to the lower bound (and stops); branches
    alive at the cutoff (or retired by the node budget) stay in the upper
    bound only.
    """
    R = escape_radius(s)
    if is_infinity(z) or abs(z) >= R:
        return ProbBounds(1.0, 1.0, 0, 1.0)
    vals = np.array([complex(z)], dtype=np.complex128)
    vtx = np.array([i - 1], dtype=np.int8)
    wts = np.array([1.0])
    lower = 0.0
    retired = 0.0
    nodes = 0
    flagged = False
    depth_done = 0
    for level in range(max_depth):
        if vals.size == 0:
            break
        cv, cx, cw = [], [], []
        for v in range(s.m):
            sel = vtx == v
            if not sel.any():
                continue
            sv, sw = vals[sel], wts[sel]
            for dst, w, poly, _ in s.out_atoms[v]:
                cv.append(poly.eval_array(sv.copy()))
                cx.append(np.full(sv.shape, dst - 1, dtype=np.int8))
                cw.append(sw * w)
        vals = np.concatenate(cv)
        vtx = np.concatenate(cx)
        wts = np.concatenate(cw)
        nodes += vals.size
        esc = ~(np.abs(vals) < R)
        lower += float(wts[esc].sum())
        keep = ~esc
        vals, vtx, wts = vals[keep], vtx[keep], wts[keep]
        depth_done = level + 1
        if vals.size:
            rec = np.empty(
                vals.size, dtype=[("v", np.int8), ("re", np.float64), ("im", np.float64)]
            )
            rec["v"], rec["re"], rec["im"] = vtx, vals.real, vals.imag
            uniq, inv = np.unique(rec, return_inverse=True)
            if uniq.size < vals.size:
                merged = np.zeros(uniq.size)
                np.add.at(merged, inv, wts)
                vals = (uniq["re"] + 1j * uniq["im"]).astype(np.complex128)
                vtx = uniq["v"].copy()
                wts = merged
        if nodes >= node_budget:
            flagged = True
            retired += float(wts.sum())
            vals = vals[:0]
            break
    unresolved = retired + float(wts.sum())
    upper = min(1.0, lower + unresolved)
    return ProbBounds(lower, upper, depth_done, 1.0 - (upper - lower), flagged)


def _tree_sweep_band(s, zflat, start_vertex, max_depth, cap, R):
    """Tree bounds for a flat array of start points, one start vertex.

    Returns (lower, width, flagged) flat arrays. Per-point node cap `cap`.
    """
    npts = zflat.shape[0]
    lower = np.zeros(npts)
    retired = np.zeros(npts)
    flagged = np.zeros(npts, dtype=bool)
    nodes = np.zeros(npts, dtype=np.int64)

    esc0 = ~(np.abs(zflat) < R)
    lower[esc0] = 1.0
    alive0 = ~esc0
    pid = np.nonzero(alive0)[0].astype(np.int64)
    vals = zflat[alive0].astype(np.complex128)
    vtx = np.full(pid.shape, start_vertex - 1, dtype=np.int8)
    wts = np.ones(pid.shape)

    for _ in range(max_depth):
        if pid.size == 0:
            break
        cp, cv, cx, cw = [], [], [], []
        for v in range(s.m):
            sel = vtx == v
            if not sel.any():
                continue
            sp, sv, sw = pid[sel], vals[sel], wts[sel]
            for dst, w, poly, _ in s.out_atoms[v]:
                cp.append(sp)
                cv.append(poly.eval_array(sv.copy()))
                cx.append(np.full(sp.shape, dst - 1, dtype=np.int8))
                cw.append(sw * w)
        pid = np.concatenate(cp)
        vals = np.concatenate(cv)
        vtx = np.concatenate(cx)
        wts = np.concatenate(cw)
        nodes += np.bincount(pid, minlength=npts)

        esc = ~(np.abs(vals) < R)
        if esc.any():
            np.add.at(lower, pid[esc], wts[esc])
        keep = ~esc
        pid, vals, vtx, wts = pid[keep], vals[keep], vtx[keep], wts[keep]

        over = nodes > cap
        if over.any():
            retire = over[pid]
            if retire.any():
                np.add.at(retired, pid[retire], wts[retire])
                flagged |= np.bincount(pid[retire], minlength=npts).astype(bool)
                keep = ~retire
                pid, vals, vtx, wts = pid[keep], vals[keep], vtx[keep], wts[keep]

        if pid.size:
            rec = np.empty(
                pid.size,
                dtype=[
                    ("p", np.int64),
                    ("v", np.int8),
                    ("re", np.float64),
                    ("im", np.float64),
                ],
            )
            rec["p"], rec["v"], rec["re"], rec["im"] = pid, vtx, vals.real, vals.imag
            uniq, inv = np.unique(rec, return_inverse=True)
            if uniq.size < pid.size:
                merged = np.zeros(uniq.size)
                np.add.at(merged, inv, wts)
                pid = uniq["p"].copy()
                vtx = uniq["v"].copy()
                vals = (uniq["re"] + 1j * uniq["im"]).astype(np.complex128)
                wts = merged

    width = retired.copy()
    if pid.size:
        np.add.at(width, pid, wts)
    np.clip(lower, 0.0, 1.0, out=lower)
    np.minimum(width, 1.0 - lower, out=width)
    return lower, width, flagged


def tree_sweep_vertex(
    s: System,
    window,
    nx: int,
    ny: int,
    start_vertex: int,
    max_depth: int = DEFAULT_DEPTH,
    node_cap: int = GRID_NODE_CAP,
    threads: int = 1,
):
    """Per-pixel certified bounds from one start vertex over a window.

    Returns (lower, width, flagged) arrays of shape (ny, nx).
    """
    R = escape_radius(s)
    z = complex_grid(window, nx, ny)
    lower = np.zeros((ny, nx))
    width = np.zeros((ny, nx))
    flagged = np.zeros((ny, nx), dtype=bool)

    bands = [(r, min(r + ROW_BAND, ny)) for r in range(0, ny, ROW_BAND)]

    def work(band):
        r0, r1 = band
        lo, wd, fl = _tree_sweep_band(
            s, z[r0:r1].ravel(), start_vertex, max_depth, node_cap, R
        )
        lower[r0:r1] = lo.reshape(r1 - r0, nx)
        width[r0:r1] = wd.reshape(r1 - r0, nx)
        flagged[r0:r1] = fl.reshape(r1 - r0, nx)

    if threads > 1:
        with _fut.ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, bands))
    else:
        for band in bands:
            work(band)
    return lower, width, flagged


# ------------------------------------------------------- averaging operator


class _StepPlan:
    """Precomputed read plan for one operator application on a fixed lattice.

    For every (source vertex, choice) the image of every pixel center is
    classified once: certified escape (reads 1), in-window (bilinear read
    from the target vertex's field), or out-of-window (read clamped to the
    nearest boundary point, counted).
    """

    def __init__(self, s: System, window, nx: int, ny: int):
        self.window = tuple(window)
        self.nx, self.ny = nx, ny
        self.m = s.m
        self.R = escape_radius(s)
        x0, x1, y0, y1 = self.window
        hx = (x1 - x0) / nx
        hy = (y1 - y0) / ny
        z = complex_grid(window, nx, ny).ravel()
        self.entries = [[] for _ in range(s.m)]
        self.oow = 0
        for v in range(s.m):
            for dst, wgt, poly, _ in s.out_atoms[v]:
                w_img = poly.eval_array(z.copy())
                mod = np.abs(w_img)
                esc = ~(mod < self.R)
                rest = ~esc
                x = w_img.real[rest]
                y = w_img.imag[rest]
                outside = (x < x0) | (x > x1) | (y < y0) | (y > y1)
                self.oow += int(outside.sum())
                u = np.clip((x - x0) / hx - 0.5, 0.0, nx - 1.0)
                t = np.clip((y - y0) / hy - 0.5, 0.0, ny - 1.0)
                i0 = np.minimum(u.astype(np.int64), nx - 2)
                j0 = np.minimum(t.astype(np.int64), ny - 2)
                fx = (u - i0).astype(np.float64)
                fy = (t - j0).astype(np.float64)
                idx = (j0 * nx + i0).astype(np.int64)
                self.entries[v].append(
                    (dst - 1, float(wgt), esc, np.nonzero(rest)[0], idx, fx, fy)
                )

    def apply(self, fields: np.ndarray) -> np.ndarray:
        """fields: (m, ny*nx) -> one averaging step, same shape."""
        nx = self.nx
        out = np.zeros_like(fields)
        for v in range(self.m):
            acc = np.zeros(fields.shape[1])
            for dst, wgt, esc, rest_idx, idx, fx, fy in self.entries[v]:
                phi = fields[dst]
                v00 = phi[idx]
                v01 = phi[idx + 1]
                v10 = phi[idx + nx]
                v11 = phi[idx + nx + 1]
                vals = (
                    v00
                    + fx * (v01 - v00)
                    + fy * (v10 - v00)
                    + fx * fy * (v00 + v11 - v01 - v10)
                )
                contrib = esc.astype(np.float64)
                contrib[rest_idx] = vals
                acc += wgt * contrib
            out[v] = acc
        return out


def markov_step(s: System, fields: list[GridField]) -> list[GridField]:
    """One application of the averaging operator to per-vertex fields."""
    if len(fields) != s.m:
        raise ValueError(f"need {s.m} fields, got {len(fields)}")
    f0 = fields[0]
    plan = _StepPlan(s, f0.window, f0.nx, f0.ny)
    stacked = np.stack([f.values.ravel() for f in fields])
    new = plan.apply(stacked)
    out = []
    for v in range(s.m):
        meta = dict(fields[v].meta, out_of_window_reads=plan.oow)
        out.append(
            GridField(f0.window, f0.nx, f0.ny, new[v].reshape(f0.ny, f0.nx), v + 1, meta)
        )
    return out


def _ramp_seed(window, nx, ny, R, m) -> np.ndarray:
    z = complex_grid(window, nx, ny).ravel()
    phi0 = np.clip((np.abs(z) - R) / R, 0.0, 1.0)
    return np.tile(phi0, (m, 1))


def operator_sweep(
    s: System,
    window,
    nx: int,
    ny: int,
    tol: float = 1e-3,
    max_iters: int = 2000,
    pad_factor: float = 1.0,
):
    """Iterate the averaging operator from the radial ramp until the sup-norm
    step change drops below tol.

    pad_factor > 1 computes on an enlarged window at the same pixel pitch and
    crops back, which keeps clamped boundary reads exact for systems whose
    field is 1 near the enlarged boundary. Returns (values (m,ny,nx), meta).
    """
    cw, cnx, cny = window, nx, ny
    if pad_factor != 1.0:
        if pad_factor < 1.0:
            raise ValueError("pad_factor must be >= 1")
        pnx = int(round(nx * pad_factor))
        pny = int(round(ny * pad_factor))
        if (pnx - nx) % 2 or (pny - ny) % 2:
            raise ValueError("pad_factor must add an even pixel count per axis")
        x0, x1, y0, y1 = window
        hx = (x1 - x0) / nx
        hy = (y1 - y0) / ny
        padx = (pnx - nx) // 2
        pady = (pny - ny) // 2
        cw = (x0 - padx * hx, x1 + padx * hx, y0 - pady * hy, y1 + pady * hy)
        cnx, cny = pnx, pny
    plan = _StepPlan(s, cw, cnx, cny)
    fields = _ramp_seed(cw, cnx, cny, plan.R, s.m)
    sup = np.inf
    iters = 0
    for iters in range(1, max_iters + 1):
        new = plan.apply(fields)
        sup = float(np.max(np.abs(new - fields)))
        fields = new
        if sup < tol:
            break
    else:
        raise NoConvergence(
            f"operator iteration still changing by {sup:.2e} after {max_iters} steps"
        )
    vals = fields.reshape(s.m, cny, cnx)
    if pad_factor != 1.0:
        out = np.empty((s.m, ny, nx))
        for v in range(s.m):
            big = GridField(cw, cnx, cny, vals[v], v + 1)
            out[v] = crop_center(big, nx, ny, window).values
        vals = out
    meta = {
        "iterations": iters,
        "sup_change": sup,
        "tolerance": tol,
        "out_of_window_reads": plan.oow,
        "pad_factor": pad_factor,
        "R": plan.R,
    }
    return vals, meta


# ------------------------------------------------------------------ sweeps


@dataclass
class TField:
    """Result of a field sweep: per-vertex fields plus the weighted aggregate.

    For the tree method, `vertex_fields` hold certified lower bounds and
    `upper_fields`/`width_fields` carry the matching interval data.
    """

    vertex_fields: list[GridField]
    aggregate: GridField
    p: np.ndarray
    R: float
    method: str
    meta: dict
    upper_fields: list[GridField] | None = None


def sweep_T(
    s: System,
    window,
    nx: int,
    ny: int,
    method: str = "operator_iteration",
    *,
    depth: int = DEFAULT_DEPTH,
    samples: int = 1000,
    seed: int = 0,
    tol: float = 1e-3,
    max_iters: int = 2000,
    node_cap: int = GRID_NODE_CAP,
    max_steps: int = 200,
    threads: int = 1,
    pad_factor: float = 1.0,
) -> TField:
    if not is_irreducible(s):
        raise NotIrreducible("aggregate field needs the stationary vector")
    p = stationary_vector(s)
    R = escape_radius(s)
    meta: dict = {"method": method, "R": R, "window": list(window), "nx": nx, "ny": ny}

    if method == "operator_iteration":
        vals, om = operator_sweep(s, window, nx, ny, tol, max_iters, pad_factor)
        meta.update(om)
        vfields = [
            GridField(window, nx, ny, vals[v], v + 1, dict(meta)) for v in range(s.m)
        ]
        upper = None
    elif method == "tree":
        meta.update({"depth": depth, "node_cap": node_cap, "values_are": "lower_bound"})
        vfields, upper = [], []
        for v in range(1, s.m + 1):
            lo, wd, fl = tree_sweep_vertex(
                s, window, nx, ny, v, max_depth=depth, node_cap=node_cap, threads=threads
            )
            mv = dict(meta, budget_flagged_pixels=int(fl.sum()))
            vfields.append(GridField(window, nx, ny, lo, v, mv))
            upper.append(GridField(window, nx, ny, np.clip(lo + wd, 0, 1), v, dict(mv)))
    elif method == "monte_carlo":
        meta.update({"samples": samples, "seed": seed, "max_steps": max_steps})
        vfields = []
        z = complex_grid(window, nx, ny)
        for v in range(1, s.m + 1):
            field = np.zeros((ny, nx))

            def work(band, v=v, field=field):
                r0, r1 = band
                for r in range(r0, r1):
                    for c in range(nx):
                        est = monte_carlo_T(
                            s,
                            complex(z[r, c]),
                            v,
                            samples,
                            max_steps,
                            seed,
                            stream_id=(v - 1) * ny * nx + r * nx + c,
                        )
                        field[r, c] = est.mean

            bands = [(r, min(r + ROW_BAND, ny)) for r in range(0, ny, ROW_BAND)]
            if threads > 1:
                with _fut.ThreadPoolExecutor(max_workers=threads) as ex:
                    list(ex.map(work, bands))
            else:
                for band in bands:
                    work(band)
            vfields.append(GridField(window, nx, ny, field, v, dict(meta)))
        upper = None
    else:
        raise ValueError(f"unknown method {method!r}")

    agg_vals = np.zeros((ny, nx))
    for v in range(s.m):
        agg_vals += p[v] * vfields[v].values
    aggregate = GridField(window, nx, ny, agg_vals, AGGREGATE, dict(meta))
    return TField(vfields, aggregate, p, R, method, meta, upper)
