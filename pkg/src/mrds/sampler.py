"""Sampling of admissible words, forward orbits, and per-word filled sets.

A word is an admissible edge/atom sequence drawn step by step: from vertex i
pick the next (edge, atom) with probability equal to the atom weight (rows
sum to 1), which factors as P(edge) * weight/P(edge) and therefore matches
the product law on cylinder sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import DeadEnd
from .grid import GridField, complex_grid
from .model import INFINITY, Polynomial, System, escape_radius, is_infinity


@dataclass(frozen=True)
class WordSample:
    start_vertex: int  # 1-based
    steps: tuple[tuple[int, int], ...]  # (edge index into System.edges, atom index)
    seed: int
    stream_id: int

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class OrbitTrace:
    points: tuple[complex, ...]
    vertices: tuple[int, ...]
    escaped_at: int | None


def _choice_table(s: System, vertex: int):
    """Deterministic outgoing choice list for a vertex: (edge_idx, atom_idx,
    weight, dst); edges sorted by (src, dst) with config order breaking
    ties, atoms in config order."""
    out = []
    order = sorted(enumerate(s.edges), key=lambda t: (t[1].src, t[1].dst, t[0]))
    for eidx, e in order:
        if e.src != vertex:
            continue
        for k, (_, w) in enumerate(e.atoms):
            out.append((eidx, k, w, e.dst))
    return out


def sample_word(
    s: System, start_vertex: int, length: int, seed: int, stream_id: int
) -> WordSample:
    if length < 1:
        raise ValueError("length must be >= 1")
    tables = {}
    gen = rng.stream(seed, stream_id)
    us = gen.random(length)
    steps = []
    v = start_vertex
    for n in range(length):
        if v not in tables:
            tables[v] = _choice_table(s, v)
        table = tables[v]
        if not table:
            raise DeadEnd(f"vertex {v} has no outgoing edge")
        cum = np.cumsum([w for (_, _, w, _) in table])
        k = int(np.searchsorted(cum, us[n], side="right"))
        k = min(k, len(table) - 1)  # u == 1.0 guard
        eidx, atom_idx, _, dst = table[k]
        steps.append((eidx, atom_idx))
        v = dst
    return WordSample(start_vertex, tuple(steps), seed, stream_id)


def word_polys(s: System, word: WordSample) -> list[Polynomial]:
    """Resolve the atom map applied at each step."""
    return [s.edges[eidx].atoms[k][0] for eidx, k in word.steps]


def word_vertices(s: System, word: WordSample) -> list[int]:
    """Vertex sequence visited by the word, starting vertex included."""
    seq = [word.start_vertex]
    for eidx, _ in word.steps:
        e = s.edges[eidx]
        if e.src != seq[-1]:
            raise ValueError("word is not admissible for this system")
        seq.append(e.dst)
    return seq


def run_orbit(s: System, z: complex, word: WordSample, max_steps: int) -> OrbitTrace:
    R = escape_radius(s)
    polys = word_polys(s, word)
    points = [complex(z)]
    vertices = [word.start_vertex]
    escaped_at = None
    if is_infinity(z) or abs(z) >= R:
        return OrbitTrace((complex(z),), (word.start_vertex,), 0)
    cur = complex(z)
    for n, (step, poly) in enumerate(zip(word.steps, polys)):
        if n >= max_steps:
            break
        cur = poly(cur)
        points.append(cur)
        vertices.append(s.edges[step[0]].dst)
        if is_infinity(cur) or abs(cur) >= R:
            escaped_at = n + 1
            break
    return OrbitTrace(tuple(points), tuple(vertices), escaped_at)


def render_random_filled_set(
    s: System,
    word: WordSample,
    window: tuple[float, float, float, float],
    resolution: tuple[int, int],
    max_steps: int,
) -> GridField:
    """Pixel value 0 where the fixed word's orbit of the pixel center escapes
    within max_steps (certified outside), 1 otherwise (depth-limited
    approximation of the bounded set from above)."""
    if len(word.steps) < max_steps:
        raise ValueError(f"word length {len(word.steps)} < max_steps {max_steps}")
    nx, ny = resolution
    R = escape_radius(s)
    polys = word_polys(s, word)
    z = complex_grid(window, nx, ny)
    alive = np.abs(z) < R
    for n in range(max_steps):
        if not alive.any():
            break
        zn = polys[n].eval_array(z[alive])
        z[alive] = zn
        still = np.abs(zn) < R  # NaN-free: eval snaps overflow to inf
        idx = np.nonzero(alive)
        alive[idx[0][~still], idx[1][~still]] = False
    values = alive.astype(np.float64)
    return GridField(
        tuple(window),
        nx,
        ny,
        values,
        vertex=word.start_vertex,
        meta={
            "kind": "random_filled_set",
            "max_steps": max_steps,
            "seed": word.seed,
            "stream_id": word.stream_id,
            "R": R,
        },
    )


def boundary_band(mask: GridField) -> GridField:
    """1-pixels of a 0/1 mask that touch a 0-pixel (4-neighborhood): the
    rendered boundary of the bounded set for that word."""
    v = mask.values > 0.5
    pad = np.pad(v, 1, mode="edge")
    has_zero_neighbor = ~(
        pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    )
    band = v & has_zero_neighbor
    return GridField(
        mask.window,
        mask.nx,
        mask.ny,
        band.astype(np.float64),
        vertex=mask.vertex,
        meta=dict(mask.meta, kind="random_julia_band"),
    )
