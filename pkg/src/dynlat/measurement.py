"""Marker-to-latent links and observation selection matrices.

Two link families map a raw marker onto the latent scale: an affine
standardization and a monotone quadratic I-spline transform with squared
weights. Selection matrices route markers to dimensions (P) and drop the
unobserved markers of one occasion (M).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import splines
from .modelspec import ISPLINE, LINEAR, SpecError

_BISECT_TOL = 1e-8


class LinkError(ValueError):
    """Invalid or non-invertible link parameters."""


@dataclass
class LinkFunction:
    """One marker's transform to the latent scale.

    For the I-spline family `eta` is (offset, w_1..w_{p+3}) and the transform
    is offset + sum_m w_m^2 I_m(y): non-decreasing by construction. `knots`
    holds (internal_knots, (lower, upper)); values outside the boundary are
    clamped and counted in `clamp_count`.
    """

    family: str
    eta: np.ndarray
    knots: tuple[tuple[float, ...], tuple[float, float]] | None = None
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if self.family == LINEAR:
            if self.eta.shape != (2,):
                raise LinkError("linear link takes parameters (offset, scale)")
        elif self.family == ISPLINE:
            if self.knots is None:
                raise LinkError("ispline link requires knot positions")
            internal, bounds = self.knots
            if self.eta.shape != (len(internal) + 4,):
                raise LinkError(f"ispline link with {len(internal)} internal knots "
                                f"takes {len(internal) + 4} parameters")
        else:
            raise LinkError(f"unknown link family {self.family!r}")

    # ----- basics --------------------------------------------------------

    def _clip(self, y):
        y = np.asarray(y, dtype=float)
        lo, hi = self.knots[1]
        out = np.clip(y, lo, hi)
        self.clamp_count += int(np.count_nonzero((y < lo) | (y > hi)))
        return out

    def _reshape(self, flat_out, y):
        return flat_out.reshape(y.shape) if y.ndim else float(flat_out[0])

    def transform(self, y):
        """Marker value(s) mapped to the latent scale; shape-preserving."""
        y = np.asarray(y, dtype=float)
        if self.family == LINEAR:
            if self.eta[1] == 0.0:
                raise LinkError("linear link scale parameter must be nonzero")
            return (y - self.eta[0]) / self.eta[1]
        basis = splines.ispline_basis(self._clip(y).ravel(), *self.knots)
        return self._reshape(self.eta[0] + basis @ self.eta[1:] ** 2, y)

    def jacobian(self, y):
        """Derivative of the transform at y (positive where invertible)."""
        y = np.asarray(y, dtype=float)
        if self.family == LINEAR:
            if self.eta[1] == 0.0:
                raise LinkError("linear link scale parameter must be nonzero")
            return np.full(y.shape, 1.0 / self.eta[1])
        basis = splines.mspline_basis(self._clip(y).ravel(), *self.knots)
        return self._reshape(basis @ self.eta[1:] ** 2, y)

    def inverse(self, ytilde):
        """Marker value whose transform equals ytilde, by bisection.

        Out-of-range targets are clamped to the transform of the boundary
        (counted in `clamp_count`). Raises LinkError for a flat link.
        """
        ytilde = np.asarray(ytilde, dtype=float)
        if self.family == LINEAR:
            if self.eta[1] == 0.0:
                raise LinkError("linear link scale parameter must be nonzero")
            return self.eta[0] + self.eta[1] * ytilde
        if not np.any(self.eta[1:] != 0.0):
            raise LinkError("flat ispline link is not invertible")
        lo, hi = self.knots[1]
        tlo = self.transform(lo)
        thi = self.transform(hi)
        target = np.clip(ytilde, tlo, thi).ravel()
        self.clamp_count += int(np.count_nonzero((ytilde < tlo) | (ytilde > thi)))

        a = np.full(target.shape, lo)
        b = np.full(target.shape, hi)
        # ~60 halvings of the bracket reach well below the tolerance.
        for _ in range(60):
            mid = 0.5 * (a + b)
            below = self.transform(mid) < target
            a = np.where(below, mid, a)
            b = np.where(below, b, mid)
            if np.max(b - a) < _BISECT_TOL * max(1.0, hi - lo):
                break
        return self._reshape(0.5 * (a + b), ytilde)


def ispline_knots_from_data(values, n_internal: int):
    """Internal knots at quantiles, boundary knots at the observed range."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size < 2 or values.min() == values.max():
        raise LinkError("need at least two distinct marker values to place knots")
    qs = np.linspace(0, 1, n_internal + 2)[1:-1]
    internal = tuple(float(v) for v in np.quantile(values, qs))
    return internal, (float(values.min()), float(values.max()))


# ---------------------------------------------------------------------------
# Selection matrices
# ---------------------------------------------------------------------------


def build_M(observed_mask) -> np.ndarray:
    """Occasion selection matrix: picks the observed markers in marker order."""
    mask = np.asarray(observed_mask, dtype=bool)
    if mask.ndim != 1:
        raise SpecError("observed mask must be one-dimensional")
    idx = np.flatnonzero(mask)
    M = np.zeros((idx.size, mask.size))
    M[np.arange(idx.size), idx] = 1.0
    return M


@dataclass(frozen=True)
class SelectionMatrices:
    """Marker-to-dimension matrix P plus per-occasion observation matrices."""

    P: np.ndarray
    M: tuple[np.ndarray, ...]
