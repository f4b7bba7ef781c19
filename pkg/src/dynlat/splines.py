"""Spline bases: B-splines, M-splines and monotone I-splines.

All bases are evaluated with a vectorized Cox-de Boor recursion on clamped
knot vectors. I-splines (integrals of M-splines) are computed through the
classical identity linking them to a cumulative sum of B-splines one order
higher, which keeps evaluation exact on each polynomial piece.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "bspline_basis",
    "mspline_basis",
    "ispline_basis",
    "augmented_knots",
]


def augmented_knots(internal_knots, boundary, order):
    """Clamped knot vector: boundary knots repeated `order` times."""
    lo, hi = float(boundary[0]), float(boundary[1])
    internal = np.asarray(internal_knots, dtype=float)
    if internal.size and (np.any(np.diff(internal) < 0) or
                          np.any(internal <= lo) or np.any(internal >= hi)):
        raise ValueError("internal knots must be sorted and strictly inside the boundary")
    if not hi > lo:
        raise ValueError("boundary knots must satisfy lower < upper")
    return np.concatenate([np.full(order, lo), internal, np.full(order, hi)])


def _bspline_design(x, knots, order):
    """Normalized B-spline basis N_{m,order} on a clamped knot vector.

    Returns an array of shape (len(x), len(knots) - order). The right
    boundary is treated as part of the last interval so the basis sums to
    one on the closed range.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.asarray(knots, dtype=float)
    n_fun = t.size - order
    hi = t[-1]

    # Order-1: indicator of the half-open knot intervals, right-closed at hi.
    n1 = t.size - 1
    B = np.zeros((x.size, n1))
    for i in range(n1):
        if t[i + 1] > t[i]:
            B[:, i] = (x >= t[i]) & ((x < t[i + 1]) | ((x == hi) & (t[i + 1] == hi)))

    for k in range(2, order + 1):
        nk = t.size - k
        Bk = np.zeros((x.size, nk))
        for i in range(nk):
            d1 = t[i + k - 1] - t[i]
            if d1 > 0:
                Bk[:, i] += (x - t[i]) / d1 * B[:, i]
            d2 = t[i + k] - t[i + 1]
            if d2 > 0:
                Bk[:, i] += (t[i + k] - x) / d2 * B[:, i + 1]
        B = Bk
    assert B.shape[1] == n_fun
    return B


def bspline_basis(x, internal_knots, boundary, order=3):
    """Quadratic (order 3 by default) B-spline basis on [boundary].

    Values outside the boundary are clamped to the nearest boundary knot.
    Returns (basis, clamped) where basis has shape (len(x), p + order) and
    clamped flags the evaluation points that fell outside the range.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = augmented_knots(internal_knots, boundary, order)
    clamped = (x < t[0]) | (x > t[-1])
    xc = np.clip(x, t[0], t[-1])
    return _bspline_design(xc, t, order), clamped


def mspline_basis(y, internal_knots, boundary, order=3):
    """M-spline basis (each member integrates to one over the boundary range).

    M_{m,k} = k / (t_{m+k} - t_m) * N_{m,k} with N the normalized B-splines.
    """
    t = augmented_knots(internal_knots, boundary, order)
    N = _bspline_design(np.clip(y, t[0], t[-1]), t, order)
    denom = t[order:] - t[:-order]
    scale = np.where(denom > 0, order / np.where(denom > 0, denom, 1.0), 0.0)
    return N * scale


def ispline_basis(y, internal_knots, boundary, order=3):
    """I-spline basis: running integrals of the M-splines of the same order.

    Each I_m is non-decreasing from 0 (left boundary) to 1 (right boundary).
    Uses the identity I_{m,k}(x) = sum_{j > m} N_{j,k+1}(x) on the knot
    vector augmented by one extra boundary repetition.
    """
    t = augmented_knots(internal_knots, boundary, order + 1)
    N = _bspline_design(np.clip(y, t[0], t[-1]), t, order + 1)
    # Reverse cumulative sum over basis index; drop the first column so the
    # count matches the M-spline basis (p + order functions).
    rev = np.cumsum(N[:, ::-1], axis=1)[:, ::-1]
    return rev[:, 1:]
