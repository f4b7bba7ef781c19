"""Latent BLUP, marker predictions, binned goodness-of-fit and k-fold CV.

Predictions exist on two scales: the transformed (latent) scale where the
model is Gaussian, and the natural marker scale reached through the inverse
links with a Monte-Carlo average. Marginal predictions condition on
covariates only; subject-specific predictions condition additionally on the
subject's own observations through the BLUP of the latent trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SubjectData
from .likelihood import link_knots, marker_links, subject_moments, transform_observations
from .modelspec import ModelSpec, Theta, unpack
from .structural import latent_moments

MARGINAL = "marginal"
SUBJECT_SPECIFIC = "subject_specific"

_JITTERS = (0.0, 1e-10, 1e-8, 1e-6)


class PredictionError(RuntimeError):
    """Prediction impossible for this subject (singular covariance, no data)."""


@dataclass
class PredictionRow:
    subject_id: str
    time: float
    j: int
    marker: str
    observed: float               # transformed scale
    marginal: float
    subject_specific: float
    natural_observed: float = np.nan
    natural_marginal: float = np.nan
    natural_subject_specific: float = np.nan
    fold: int = -1


@dataclass
class PredictionSet:
    rows: list[PredictionRow] = field(default_factory=list)
    ndraws: int = 0
    failed_folds: list[int] = field(default_factory=list)


def _solve_obs(V_obs, rhs):
    n = V_obs.shape[0]
    for jit in _JITTERS:
        try:
            L = np.linalg.cholesky(V_obs + jit * np.eye(n) if jit else V_obs)
        except np.linalg.LinAlgError:
            continue
        return np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    raise PredictionError("observation covariance is singular")


def _obs_layout(subject: SubjectData, spec: ModelSpec):
    """Flat latent-row indices and residual-variance slots of the observations."""
    D = spec.dimensions
    dims = np.array([mk.dimension for mk in spec.markers])
    lat_idx, sig_idx = [], []
    for occ in subject.occasions:
        for k in np.flatnonzero(occ.mask):
            lat_idx.append(occ.j * D + dims[k])
            sig_idx.append(k)
    return np.asarray(lat_idx, dtype=int), np.asarray(sig_idx, dtype=int)


def blup_latent(theta: Theta, subject: SubjectData, spec: ModelSpec,
                knots=None) -> np.ndarray:
    """Best linear unbiased prediction of the latent trajectory, (J+1, D).

    Conditions the latent Gaussian on the subject's transformed observations.
    A subject without observations gets the marginal mean.
    """
    mean, cov = conditional_latent(theta, subject, spec, knots)
    return mean.reshape(spec.grid_len + 1, spec.dimensions)


def conditional_latent(theta: Theta, subject: SubjectData, spec: ModelSpec,
                       knots=None):
    """Mean and covariance of the stacked latent path given the observations."""
    if knots is None:
        knots = [None] * spec.n_markers
    from .modelspec import build_design

    design = build_design(spec, subject.covariates)
    lm = latent_moments(design, theta, spec)
    lat_idx, sig_idx = _obs_layout(subject, spec)
    if lat_idx.size == 0:
        return lm.mu, lm.V

    y, _ = transform_observations(theta, subject, spec, knots)
    mu_obs = lm.mu[lat_idx]
    V_obs = lm.V[np.ix_(lat_idx, lat_idx)] + np.diag(theta.sigma[sig_idx] ** 2)
    C = lm.V[:, lat_idx]
    sol = _solve_obs(V_obs, np.column_stack([y - mu_obs, C.T]))
    mean = lm.mu + C @ sol[:, 0]
    cov = lm.V - C @ sol[:, 1:]
    return mean, 0.5 * (cov + cov.T)


def predict_transformed(theta: Theta, subject: SubjectData, spec: ModelSpec,
                        mode: str = MARGINAL, knots=None) -> np.ndarray:
    """Marker predictions on the transformed scale over the grid, ((J+1), K).

    MARGINAL uses the population latent mean given covariates;
    SUBJECT_SPECIFIC uses the BLUP latent path.
    """
    from .modelspec import build_design

    if mode == MARGINAL:
        design = build_design(spec, subject.covariates)
        from .structural import latent_mean

        lam = latent_mean(design, theta, spec)
    elif mode == SUBJECT_SPECIFIC:
        lam = blup_latent(theta, subject, spec, knots)
    else:
        raise PredictionError(f"unknown prediction mode {mode!r}")
    dims = [mk.dimension for mk in spec.markers]
    return lam[:, dims]


def predict_natural(theta: Theta, subject: SubjectData, spec: ModelSpec,
                    mode: str = MARGINAL, ndraws: int = 1000, rng=None,
                    knots=None) -> np.ndarray:
    """Natural-scale predictions over the grid, ((J+1), K), by Monte Carlo.

    Draws transformed-scale outcomes from the marginal (or conditional)
    Gaussian of each (occasion, marker), applies the inverse links and
    averages. Deterministic under a fixed seed.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if knots is None:
        knots = [None] * spec.n_markers
    from .modelspec import build_design

    D, K, J1 = spec.dimensions, spec.n_markers, spec.grid_len + 1
    dims = np.array([mk.dimension for mk in spec.markers])
    if mode == MARGINAL:
        design = build_design(spec, subject.covariates)
        lm = latent_moments(design, theta, spec)
        mu, V = lm.mu, lm.V
    elif mode == SUBJECT_SPECIFIC:
        mu, V = conditional_latent(theta, subject, spec, knots)
    else:
        raise PredictionError(f"unknown prediction mode {mode!r}")

    rows = np.arange(J1).repeat(K) * D + np.tile(dims, J1)
    mean = mu[rows].reshape(J1, K)
    sd = np.sqrt(np.clip(V[rows, rows].reshape(J1, K), 0.0, None)
                 + theta.sigma[None, :] ** 2)
    draws = mean[None] + sd[None] * rng.standard_normal((ndraws, J1, K))

    links = marker_links(spec, theta, knots)
    out = np.empty((J1, K))
    for k in range(K):
        out[:, k] = np.mean(links[k].inverse(draws[:, :, k]), axis=0)
    return out


def predict_dataset(theta: Theta, dataset: Dataset, spec: ModelSpec,
                    natural: bool = False, ndraws: int = 1000,
                    seed: int | None = 0, fold: int = -1) -> PredictionSet:
    """Per-observation marginal and subject-specific predictions."""
    knots = link_knots(spec, dataset)
    links = marker_links(spec, theta, knots)
    out = PredictionSet(ndraws=ndraws if natural else 0)
    for si, subj in enumerate(dataset.subjects):
        marg = predict_transformed(theta, subj, spec, MARGINAL, knots)
        ss = predict_transformed(theta, subj, spec, SUBJECT_SPECIFIC, knots)
        if natural:
            rng = np.random.default_rng([0 if seed is None else seed, si])
            nat_m = predict_natural(theta, subj, spec, MARGINAL, ndraws, rng, knots)
            rng = np.random.default_rng([0 if seed is None else seed, si])
            nat_s = predict_natural(theta, subj, spec, SUBJECT_SPECIFIC, ndraws,
                                    rng, knots)
        for occ in subj.occasions:
            for k in np.flatnonzero(occ.mask):
                row = PredictionRow(
                    subject_id=subj.id,
                    time=occ.time,
                    j=occ.j,
                    marker=spec.marker_names[k],
                    observed=float(links[k].transform(occ.values[k])),
                    marginal=float(marg[occ.j, k]),
                    subject_specific=float(ss[occ.j, k]),
                    fold=fold,
                )
                if natural:
                    row.natural_observed = float(occ.values[k])
                    row.natural_marginal = float(nat_m[occ.j, k])
                    row.natural_subject_specific = float(nat_s[occ.j, k])
                out.rows.append(row)
    return out


# ---------------------------------------------------------------------------
# Goodness of fit
# ---------------------------------------------------------------------------


@dataclass
class GofBin:
    marker: str
    bin_lo: float
    bin_hi: float
    n: int
    observed_mean: float
    ci_lo: float
    ci_hi: float
    predicted_mean: float


def gof_binned(predictions: PredictionSet, bin_edges,
               column: str = SUBJECT_SPECIFIC, natural: bool = False) -> list[GofBin]:
    """Observed vs predicted means within time bins, per marker.

    The CI is a normal approximation on the observed mean. Empty bins come
    back with n=0 and NaN means so the table always covers every bin.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise PredictionError("bin edges must be increasing with >= 2 entries")
    obs_attr = "natural_observed" if natural else "observed"
    pred_attr = {
        SUBJECT_SPECIFIC: "natural_subject_specific" if natural else "subject_specific",
        MARGINAL: "natural_marginal" if natural else "marginal",
    }[column]

    markers = sorted({r.marker for r in predictions.rows})
    out = []
    for marker in markers:
        rows = [r for r in predictions.rows if r.marker == marker]
        times = np.array([r.time for r in rows])
        obs = np.array([getattr(r, obs_attr) for r in rows])
        pred = np.array([getattr(r, pred_attr) for r in rows])
        # right-closed last bin so the final edge is included
        which = np.clip(np.searchsorted(edges, times, side="right") - 1,
                        0, edges.size - 2)
        inside = (times >= edges[0]) & (times <= edges[-1])
        for b in range(edges.size - 1):
            sel = inside & (which == b)
            n = int(sel.sum())
            if n == 0:
                out.append(GofBin(marker, edges[b], edges[b + 1], 0,
                                  np.nan, np.nan, np.nan, np.nan))
                continue
            m = float(obs[sel].mean())
            se = float(obs[sel].std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            out.append(GofBin(marker, edges[b], edges[b + 1], n, m,
                              m - 1.96 * se, m + 1.96 * se,
                              float(pred[sel].mean())))
    return out


# ---------------------------------------------------------------------------
# Cross validation
# ---------------------------------------------------------------------------


def kfold_cv(spec: ModelSpec, dataset: Dataset, k: int = 5, seed: int = 0,
             config=None, natural: bool = False, ndraws: int = 1000) -> PredictionSet:
    """Out-of-fold subject-specific predictions from k refits.

    Subjects are shuffled into k groups by the seed; each fold's model is
    fitted on the other groups and predicts the held-out subjects. A fold
    whose fit fails is recorded in `failed_folds` and skipped.
    """
    from .optimizer import FitError, fit

    n = len(dataset)
    if k < 2 or n < k:
        raise PredictionError("need k >= 2 and at least k subjects")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    groups = np.array_split(order, k)

    out = PredictionSet(ndraws=ndraws if natural else 0)
    for fold, held in enumerate(groups):
        held_set = set(int(i) for i in held)
        train = Dataset([s for i, s in enumerate(dataset.subjects)
                         if i not in held_set],
                        dataset.marker_names, dataset.covariate_names)
        test = Dataset([s for i, s in enumerate(dataset.subjects)
                        if i in held_set],
                       dataset.marker_names, dataset.covariate_names)
        try:
            res = fit(spec, train, config=config)
        except (FitError, np.linalg.LinAlgError):
            out.failed_folds.append(fold)
            continue
        theta = unpack(res.theta_hat, spec)
        # knots belong to the training data; rebuild predictions accordingly
        knots = link_knots(spec, train)
        preds = _predict_with_knots(theta, test, spec, knots, natural, ndraws,
                                    seed, fold)
        out.rows.extend(preds)
    return out


def _predict_with_knots(theta, dataset, spec, knots, natural, ndraws, seed, fold):
    links = marker_links(spec, theta, knots)
    rows = []
    for si, subj in enumerate(dataset.subjects):
        marg = predict_transformed(theta, subj, spec, MARGINAL, knots)
        ss = predict_transformed(theta, subj, spec, SUBJECT_SPECIFIC, knots)
        if natural:
            rng = np.random.default_rng([seed, fold, si])
            nat_m = predict_natural(theta, subj, spec, MARGINAL, ndraws, rng, knots)
            rng = np.random.default_rng([seed, fold, si])
            nat_s = predict_natural(theta, subj, spec, SUBJECT_SPECIFIC, ndraws,
                                    rng, knots)
        for occ in subj.occasions:
            for kk in np.flatnonzero(occ.mask):
                row = PredictionRow(
                    subject_id=subj.id, time=occ.time, j=occ.j,
                    marker=spec.marker_names[kk],
                    observed=float(links[kk].transform(occ.values[kk])),
                    marginal=float(marg[occ.j, kk]),
                    subject_specific=float(ss[occ.j, kk]),
                    fold=fold,
                )
                if natural:
                    row.natural_observed = float(occ.values[kk])
                    row.natural_marginal = float(nat_m[occ.j, kk])
                    row.natural_subject_specific = float(nat_s[occ.j, kk])
                rows.append(row)
    return rows
