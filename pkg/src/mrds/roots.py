"""All-roots polynomial solving: simultaneous (Aberth-Ehrlich) iteration.

One kernel solves p(w) = rhs for a whole batch of right-hand sides at once
(the backward-orbit samplers call it with thousands of rhs values and a
degree-4 map). Initial guesses sit on a circle of radius 1 + max|a_k/a_d| of
the shifted polynomial, at deterministically perturbed angles so symmetric
configurations cannot stall the iteration. Everything here is deterministic:
no RNG, fixed iteration order.
"""

from __future__ import annotations

import numpy as np

from .errors import NoConvergence
from .model import Polynomial

MAX_ITER = 200
RESIDUAL_FACTOR = 1e-9


def _horner_pair(coeffs: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate p and p' at w (coeffs ascending, highest first in the loop)."""
    p = np.zeros_like(w)
    dp = np.zeros_like(w)
    for c in coeffs[::-1]:
        dp = dp * w + p
        p = p * w + c
    return p, dp


def aberth_all(coeffs, rhs, max_iter: int = MAX_ITER):
    """Roots of p(w) = rhs_b for every b. coeffs ascending (d+1,), rhs (B,).

    Returns (roots (B, d), converged (B,) bool). Multiplicities appear as
    clustered near-equal roots (convergence there is linear, which the
    iteration cap accommodates for the degrees used in this package).
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    rhs = np.asarray(rhs, dtype=np.complex128)
    d = len(coeffs) - 1
    if d < 1:
        raise ValueError("degree must be >= 1")
    B = rhs.shape[0]
    lead = coeffs[-1]

    shifted0 = coeffs[0] - rhs  # constant term of p - rhs, per batch row
    mags = np.abs(coeffs[1:-1])[None, :] if d >= 2 else np.zeros((1, 0))
    radius = 1.0 + (
        np.maximum(np.abs(shifted0), mags.max(axis=1) if mags.size else 0.0)
        / abs(lead)
    )
    scale = np.maximum(np.abs(shifted0), np.max(np.abs(coeffs[1:])))
    tol = RESIDUAL_FACTOR * np.maximum(scale, 1.0)

    k = np.arange(d)
    angles = 2 * np.pi * (k + 0.5) / d + 0.11 * np.sin(3.7 * k + 1.0)
    w = radius[:, None] * np.exp(1j * angles)[None, :]

    body = coeffs[1:].copy()  # reused; constant term handled per-row below

    def eval_pair(wv, rv):
        p = np.zeros_like(wv)
        dp = np.zeros_like(wv)
        for c in body[::-1]:
            dp = dp * wv + p
            p = p * wv + c
        dp = dp * wv + p
        p = p * wv + (coeffs[0] - rv[:, None])
        return p, dp

    active = np.ones(B, dtype=bool)
    for _ in range(max_iter):
        wa = w[active]
        pa, dpa = eval_pair(wa, rhs[active])
        res_ok = np.all(np.abs(pa) <= tol[active, None], axis=1)
        if res_ok.any():
            idx = np.nonzero(active)[0]
            active[idx[res_ok]] = False
            if not active.any():
                break
            wa = w[active]
            pa, dpa = eval_pair(wa, rhs[active])
        # Newton ratio with a guard against vanishing derivative
        small = np.abs(dpa) < 1e-300
        dpa = np.where(small, 1e-300 + 0j, dpa)
        N = pa / dpa
        diff = wa[:, :, None] - wa[:, None, :]
        np.einsum("bii->bi", diff)[...] = np.inf  # exclude self terms
        S = np.sum(1.0 / diff, axis=2)
        denom = 1.0 - N * S
        step = np.where(np.abs(denom) > 1e-12, N / denom, N)
        w[active] = wa - step
    else:
        # final residual check for rows still active
        if active.any():
            pa, _ = eval_pair(w[active], rhs[active])
            res_ok = np.all(np.abs(pa) <= tol[active, None], axis=1)
            idx = np.nonzero(active)[0]
            active[idx[res_ok]] = False
    return w, ~active


def roots(p: Polynomial, rhs: complex = 0j) -> list[complex]:
    """All degree-many roots of p(w) = rhs, with multiplicity.

    Raises NoConvergence if the residual target is missed after the
    iteration cap (the best iterates are attached to the exception).
    """
    w, ok = aberth_all(np.asarray(p.coeffs), np.array([complex(rhs)]))
    if not ok[0]:
        exc = NoConvergence(f"root solve missed residual target (degree {p.degree})")
        exc.best = list(w[0])
        raise exc
    return list(w[0])


def residual(p: Polynomial, w: complex, rhs: complex = 0j) -> float:
    return abs(p(w) - rhs)
