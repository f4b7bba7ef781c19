"""Declarative model description and parameter packing.

A :class:`ModelSpec` describes the latent system (dimensions, discretization
grid), the markers with their link families, the covariate design and the
regression structure of the temporal-influence matrix. It is immutable and
safe to share across workers.

:class:`Theta` holds the structured parameters; :func:`pack` / :func:`unpack`
map them bijectively onto the flat optimizer vector. Identifiability is
enforced through the Cholesky factor L of the random-effect covariance:
diagonal entries of the baseline block are fixed at one, and entries that
would couple rate-of-change effects across dimensions (or a baseline effect
of one dimension with the rate effects of another) are structural zeros.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

INTERCEPT = "intercept"

LINEAR = "linear"
ISPLINE = "ispline"


class SpecError(ValueError):
    """Invalid model specification or mismatched inputs."""


@dataclass(frozen=True)
class LinkSpec:
    family: str
    n_internal_knots: int = 0

    def __post_init__(self):
        if self.family not in (LINEAR, ISPLINE):
            raise SpecError(f"unknown link family {self.family!r}")
        if self.family == ISPLINE and self.n_internal_knots < 0:
            raise SpecError("n_internal_knots must be >= 0")

    @property
    def n_eta(self) -> int:
        # linear: (offset, scale); ispline: offset + p+3 squared weights
        return 2 if self.family == LINEAR else self.n_internal_knots + 4


@dataclass(frozen=True)
class MarkerSpec:
    name: str
    dimension: int  # 0-based latent dimension index
    link: LinkSpec


@dataclass(frozen=True)
class InfluenceSpec:
    """Regression structure of the temporal-influence matrix entries.

    Each entry a_dd'(t) is a linear combination of `regressors` (covariate
    names, intercept first) and, when `time_basis_knots` is set, of quadratic
    B-spline time-basis columns. The first basis function is dropped to keep
    the columns linearly independent of the intercept. Time-basis columns
    apply to every off-diagonal entry but only to the diagonal entries whose
    `diag_time_varying` flag is set.
    """

    regressors: tuple[str, ...] = (INTERCEPT,)
    time_basis_knots: tuple[float, ...] = ()
    has_time_basis: bool = False
    diag_time_varying: tuple[bool, ...] = ()

    def __post_init__(self):
        if not self.regressors or self.regressors[0] != INTERCEPT:
            raise SpecError("influence regressors must start with the intercept")
        if self.time_basis_knots and not self.has_time_basis:
            object.__setattr__(self, "has_time_basis", True)

    @property
    def n_time_cols(self) -> int:
        return (len(self.time_basis_knots) + 2) if self.has_time_basis else 0

    @property
    def n_cols(self) -> int:
        return len(self.regressors) + self.n_time_cols


@dataclass(frozen=True)
class ModelSpec:
    dimensions: int
    markers: tuple[MarkerSpec, ...]
    delta: float
    grid_len: int
    baseline_covariates: tuple[tuple[str, ...], ...]
    trend_covariates: tuple[tuple[str, ...], ...]
    random_effects: tuple[tuple[str, ...], ...]
    influence: InfluenceSpec = field(default_factory=InfluenceSpec)
    u_correlated: bool = False

    def __post_init__(self):
        D = self.dimensions
        if D < 1:
            raise SpecError("need at least one latent dimension")
        if len(self.markers) < D:
            raise SpecError("need at least one marker per latent dimension")
        seen = set()
        for mk in self.markers:
            if mk.name in seen:
                raise SpecError(f"duplicate marker name {mk.name!r}")
            seen.add(mk.name)
            if not 0 <= mk.dimension < D:
                raise SpecError(f"marker {mk.name!r} maps to unknown dimension {mk.dimension}")
        measured = {mk.dimension for mk in self.markers}
        if measured != set(range(D)):
            raise SpecError("every latent dimension needs at least one marker")
        if not self.delta > 0:
            raise SpecError("discretization step delta must be > 0")
        if self.grid_len < 1:
            raise SpecError("grid_len must be >= 1")
        for group in (self.baseline_covariates, self.trend_covariates, self.random_effects):
            if len(group) != D:
                raise SpecError("covariate lists must be given per latent dimension")
        for names in self.baseline_covariates:
            if INTERCEPT in names:
                raise SpecError("baseline design excludes the intercept (identifiability)")
        ndiag = len(self.influence.diag_time_varying)
        if ndiag not in (0, D):
            raise SpecError("diag_time_varying must have one flag per dimension")

    # ----- derived sizes -------------------------------------------------

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    @property
    def marker_names(self) -> tuple[str, ...]:
        return tuple(mk.name for mk in self.markers)

    @property
    def q_per_dim(self) -> tuple[int, ...]:
        return tuple(len(z) for z in self.random_effects)

    @property
    def n_random(self) -> int:
        return sum(self.q_per_dim)

    @property
    def p0(self) -> int:
        return sum(len(c) for c in self.baseline_covariates)

    @property
    def p_trend(self) -> int:
        return sum(len(c) for c in self.trend_covariates)

    @property
    def time_grid(self) -> np.ndarray:
        return self.delta * np.arange(self.grid_len + 1)

    def projection_matrix(self) -> np.ndarray:
        """K x D selection matrix: entry (k, d) = 1 iff marker k measures d."""
        P = np.zeros((self.n_markers, self.dimensions))
        for k, mk in enumerate(self.markers):
            P[k, mk.dimension] = 1.0
        return P

    # ----- Cholesky factor structure ------------------------------------

    def l_structure(self):
        """(free_entries, fixed_one_entries) of L, each a list of (row, col).

        Row layout: baseline effects u_1..u_D first, then the rate-of-change
        effects of each dimension in order. Free entries are row-major.
        """
        D, qd = self.dimensions, self.q_per_dim
        offs = np.concatenate([[0], np.cumsum(qd)])
        free, ones = [], []
        for d in range(D):
            for j in range(d):
                if self.u_correlated:
                    free.append((d, j))
            ones.append((d, d))
        for d in range(D):
            base = D + offs[d]
            for c in range(qd[d]):
                row = base + c
                free.append((row, d))            # coupling with own baseline effect
                for j in range(base, row + 1):   # within-dimension rate block
                    free.append((row, j))
        return free, ones

    def n_l_params(self) -> int:
        return len(self.l_structure()[0])

    def alpha_free_mask(self) -> np.ndarray:
        """Boolean (D, D, r): which influence-regression coefficients are free."""
        D = self.dimensions
        inf = self.influence
        mask = np.ones((D, D, inf.n_cols), dtype=bool)
        if inf.n_time_cols:
            flags = inf.diag_time_varying or (False,) * D
            ncov = len(inf.regressors)
            for d in range(D):
                if not flags[d]:
                    mask[d, d, ncov:] = False
        return mask

    def n_params(self) -> int:
        n_eta = sum(mk.link.n_eta for mk in self.markers)
        return (self.p0 + self.p_trend + self.n_l_params()
                + int(self.alpha_free_mask().sum()) + self.n_markers + n_eta)

    def parameter_names(self) -> list[str]:
        names = []
        for d, covs in enumerate(self.baseline_covariates):
            names += [f"beta{d + 1}_{c}" for c in covs]
        for d, covs in enumerate(self.trend_covariates):
            names += [f"gamma{d + 1}_{c}" for c in covs]
        names += [f"L({i + 1},{j + 1})" for i, j in self.l_structure()[0]]
        mask = self.alpha_free_mask()
        D = self.dimensions
        for d in range(D):
            for d2 in range(D):
                names += [f"alpha{d + 1}{d2 + 1}_{m}"
                          for m in range(mask.shape[2]) if mask[d, d2, m]]
        names += [f"sigma_{mk.name}" for mk in self.markers]
        for mk in self.markers:
            names += [f"eta_{mk.name}_{m}" for m in range(mk.link.n_eta)]
        return names

    # ----- JSON ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dimensions": self.dimensions,
            "delta": self.delta,
            "grid_len": self.grid_len,
            "markers": [
                {"name": mk.name, "dimension": mk.dimension,
                 "link": ({"family": LINEAR} if mk.link.family == LINEAR else
                          {"family": ISPLINE, "n_internal_knots": mk.link.n_internal_knots})}
                for mk in self.markers
            ],
            "baseline_covariates": [list(c) for c in self.baseline_covariates],
            "trend_covariates": [list(c) for c in self.trend_covariates],
            "random_effects": [list(c) for c in self.random_effects],
            "influence": {
                "regressors": list(self.influence.regressors),
                "time_basis_knots": list(self.influence.time_basis_knots),
                "has_time_basis": self.influence.has_time_basis,
                "diag_time_varying": list(self.influence.diag_time_varying),
            },
            "u_correlated": self.u_correlated,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        validate_spec_document(doc)
        inf = doc.get("influence", {})
        return cls(
            dimensions=doc["dimensions"],
            markers=tuple(
                MarkerSpec(m["name"], m["dimension"],
                           LinkSpec(m["link"]["family"],
                                    m["link"].get("n_internal_knots", 0)))
                for m in doc["markers"]
            ),
            delta=doc["delta"],
            grid_len=doc["grid_len"],
            baseline_covariates=tuple(tuple(c) for c in doc["baseline_covariates"]),
            trend_covariates=tuple(tuple(c) for c in doc["trend_covariates"]),
            random_effects=tuple(tuple(c) for c in doc["random_effects"]),
            influence=InfluenceSpec(
                regressors=tuple(inf.get("regressors", [INTERCEPT])),
                time_basis_knots=tuple(inf.get("time_basis_knots", [])),
                has_time_basis=inf.get("has_time_basis", bool(inf.get("time_basis_knots"))),
                diag_time_varying=tuple(inf.get("diag_time_varying", [])),
            ),
            u_correlated=doc.get("u_correlated", False),
        )

    @classmethod
    def from_json(cls, path) -> "ModelSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_delta(self, delta: float, horizon: float | None = None) -> "ModelSpec":
        """Copy with a new discretization step; grid covers the same horizon."""
        if horizon is None:
            horizon = self.grid_len * self.delta
        grid_len = max(1, int(np.floor(horizon / delta + 1e-9)))
        return ModelSpec(self.dimensions, self.markers, delta, grid_len,
                         self.baseline_covariates, self.trend_covariates,
                         self.random_effects, self.influence, self.u_correlated)


def validate_spec_document(doc: dict) -> None:
    import jsonschema

    schema = json.loads(resources.files("dynlat").joinpath("spec.schema.json").read_text())
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise SpecError(f"model spec document invalid: {exc.message}") from exc


# ---------------------------------------------------------------------------
# Structured parameters and flat-vector packing
# ---------------------------------------------------------------------------


@dataclass
class Theta:
    """Structured parameters; `alpha` keeps fixed coefficients at zero."""

    beta: np.ndarray      # (p0,)
    gamma: np.ndarray     # (p_trend,)
    l_params: np.ndarray  # free entries of L, row-major
    alpha: np.ndarray     # (D, D, r)
    sigma: np.ndarray     # (K,) residual scales, unconstrained sign
    eta: list[np.ndarray]  # per marker

    def copy(self) -> "Theta":
        return Theta(self.beta.copy(), self.gamma.copy(), self.l_params.copy(),
                     self.alpha.copy(), self.sigma.copy(), [e.copy() for e in self.eta])


def pack(theta: Theta, spec: ModelSpec) -> np.ndarray:
    _check_shapes(theta, spec)
    mask = spec.alpha_free_mask()
    parts = [theta.beta, theta.gamma, theta.l_params, theta.alpha[mask], theta.sigma]
    parts += theta.eta
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unpack(flat: np.ndarray, spec: ModelSpec) -> Theta:
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (spec.n_params(),):
        raise SpecError(f"expected {spec.n_params()} parameters, got {flat.shape}")
    pos = 0

    def take(n):
        nonlocal pos
        out = flat[pos:pos + n]
        pos += n
        return out.copy()

    beta = take(spec.p0)
    gamma = take(spec.p_trend)
    l_params = take(spec.n_l_params())
    mask = spec.alpha_free_mask()
    alpha = np.zeros(mask.shape)
    alpha[mask] = take(int(mask.sum()))
    sigma = take(spec.n_markers)
    eta = [take(mk.link.n_eta) for mk in spec.markers]
    return Theta(beta, gamma, l_params, alpha, sigma, eta)


def _check_shapes(theta: Theta, spec: ModelSpec) -> None:
    mask = spec.alpha_free_mask()
    expect = [
        ("beta", np.shape(theta.beta), (spec.p0,)),
        ("gamma", np.shape(theta.gamma), (spec.p_trend,)),
        ("l_params", np.shape(theta.l_params), (spec.n_l_params(),)),
        ("alpha", np.shape(theta.alpha), mask.shape),
        ("sigma", np.shape(theta.sigma), (spec.n_markers,)),
    ]
    for name, got, want in expect:
        if tuple(got) != tuple(want):
            raise SpecError(f"{name} has shape {got}, expected {want}")
    if len(theta.eta) != spec.n_markers:
        raise SpecError("one eta vector per marker required")
    for mk, e in zip(spec.markers, theta.eta):
        if np.shape(e) != (mk.link.n_eta,):
            raise SpecError(f"eta for marker {mk.name!r} has shape {np.shape(e)}, "
                            f"expected {(mk.link.n_eta,)}")


def assemble_L(l_params, spec: ModelSpec) -> np.ndarray:
    """Lower-triangular Cholesky factor with fixed ones and structural zeros."""
    free, ones = spec.l_structure()
    n = spec.dimensions + spec.n_random
    L = np.zeros((n, n))
    for (i, j) in ones:
        L[i, j] = 1.0
    vals = np.asarray(l_params, dtype=float)
    if vals.shape != (len(free),):
        raise SpecError(f"expected {len(free)} free L entries, got {vals.shape}")
    for (i, j), v in zip(free, vals):
        L[i, j] = v
    return L


def assemble_B(l_params, spec: ModelSpec) -> np.ndarray:
    """Random-effect covariance B = L L^T (positive semidefinite by construction)."""
    L = assemble_L(l_params, spec)
    return L @ L.T


# ---------------------------------------------------------------------------
# Per-subject design matrices
# ---------------------------------------------------------------------------


@dataclass
class DesignSet:
    """Block-structured design matrices for one subject on the grid."""

    X0: np.ndarray  # (D, p0)
    X: np.ndarray   # (J+1, D, p_trend)
    Z: np.ndarray   # (J+1, D, q)
    R: np.ndarray   # (J+1, r) influence regressors incl. time basis


def _covariate_value(covariates, name):
    if name == INTERCEPT:
        return 1.0
    try:
        value = float(covariates[name])
    except KeyError:
        raise SpecError(f"covariate {name} not found") from None
    if not np.isfinite(value):
        raise SpecError(f"covariate {name} is not finite")
    return value


def _block_rows(per_dim_names, covariates, D):
    """Row d carries only dimension-d regressors; other columns stay zero."""
    p = sum(len(n) for n in per_dim_names)
    out = np.zeros((D, p))
    col = 0
    for d, names in enumerate(per_dim_names):
        for name in names:
            out[d, col] = _covariate_value(covariates, name)
            col += 1
    return out


def influence_time_basis(spec: ModelSpec, times) -> np.ndarray:
    """Time-basis columns of the influence regression, first basis dropped."""
    from . import splines

    horizon = spec.grid_len * spec.delta
    basis, _ = splines.bspline_basis(times, spec.influence.time_basis_knots,
                                     (0.0, horizon))
    return basis[:, 1:]


def build_design(spec: ModelSpec, covariates, time_grid=None) -> DesignSet:
    """Design matrices for one subject from its covariate name->value map."""
    D = spec.dimensions
    times = spec.time_grid if time_grid is None else np.asarray(time_grid, float)
    J1 = times.size

    X0 = _block_rows(spec.baseline_covariates, covariates, D)
    # Trend and random-effect regressors are constant over the grid here
    # (time-dependence enters through the influence matrix time basis).
    X = np.repeat(_block_rows(spec.trend_covariates, covariates, D)[None], J1, axis=0)
    Z = np.repeat(_block_rows(spec.random_effects, covariates, D)[None], J1, axis=0)

    inf = spec.influence
    R = np.empty((J1, inf.n_cols))
    for m, name in enumerate(inf.regressors):
        R[:, m] = _covariate_value(covariates, name)
    if inf.n_time_cols:
        R[:, len(inf.regressors):] = influence_time_basis(spec, times)
    return DesignSet(X0=X0, X=X, Z=Z, R=R)
