"""Maximum-likelihood fitting by an extended Levenberg-Marquardt scheme.

The objective is the negative log-likelihood. Each iteration forms the exact
finite-difference Hessian, inflates its diagonal by a damping factor, solves
for the Newton-like step and halves it until the objective improves.
Convergence requires three criteria at once: a small step, a small objective
change and a small relative distance to the maximum (the gradient measured
in the metric of the inverse Hessian, per parameter).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .likelihood import Evaluator, gradient_fd, hessian_fd
from .modelspec import ModelSpec, Theta, pack, unpack


class FitError(RuntimeError):
    """The optimizer could not make progress from the starting point."""


@dataclass
class FitConfig:
    eps_step: float = 1e-3
    eps_obj: float = 1e-3
    eps_rdm: float = 1e-3
    max_iters: int = 500
    max_halvings: int = 30
    lambda_init: float = 1e-3
    verbose: bool = False


@dataclass
class FitResult:
    theta_hat: np.ndarray
    se: np.ndarray
    loglik: float
    n_params: int
    n_subjects: int
    iterations: int
    converged: bool
    crit_step: float
    crit_obj: float
    crit_rdm: float
    parameter_names: list[str] = field(default_factory=list)

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params

    def theta(self, spec: ModelSpec) -> Theta:
        return unpack(self.theta_hat, spec)

    def wald(self, index: int) -> tuple[float, float]:
        """Wald z statistic and two-sided p-value for one parameter."""
        from scipy.stats import norm

        z = self.theta_hat[index] / self.se[index]
        return float(z), float(2.0 * norm.sf(abs(z)))

    def summary_rows(self):
        for name, est, se in zip(self.parameter_names, self.theta_hat, self.se):
            yield name, float(est), float(se)


def lm_maximize(f, x0: np.ndarray, config: FitConfig | None = None,
                n_units: int = 1):
    """Maximize a batched objective f((B, p)) -> (B,) from x0.

    Returns (x, value, hessian_of_negative, iterations, converged, criteria).
    `n_units` scales the relative-distance criterion (number of subjects).
    """
    config = config or FitConfig()
    x = np.asarray(x0, dtype=float).copy()
    p = x.size

    def neg(xs):
        return -f(xs)

    fx = float(neg(x[None, :])[0])
    if not np.isfinite(fx):
        raise FitError("objective is not finite at the starting point")

    lam = config.lambda_init
    crit_step = crit_obj = crit_rdm = np.inf
    converged = False
    it = 0
    H = np.eye(p)
    for it in range(1, config.max_iters + 1):
        g = gradient_fd(x, neg)
        H = hessian_fd(x, neg, f0=fx)

        accepted = False
        for _ in range(25):  # damping escalations
            Hstar = H + lam * np.diag(np.abs(np.diag(H)))
            try:
                step = np.linalg.solve(Hstar, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            nu, trial_f, trial_x = 1.0, np.inf, x
            for _ in range(config.max_halvings):
                cand = x + nu * step
                val = float(neg(cand[None, :])[0])
                if np.isfinite(val) and val < fx:
                    trial_f, trial_x = val, cand
                    break
                nu *= 0.5
            if np.isfinite(trial_f):
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break

        crit_step = float(np.linalg.norm(trial_x - x))
        crit_obj = abs(fx - trial_f)
        x, fx = trial_x, trial_f
        lam = max(lam / 10.0, 1e-12)

        crit_rdm = _rdm(g, H, max(n_units, 1))
        if config.verbose:
            print(f"iter {it:3d}  nll {fx:.6f}  step {crit_step:.2e}  "
                  f"dobj {crit_obj:.2e}  rdm {crit_rdm:.2e}")
        if (crit_step < config.eps_step and crit_obj < config.eps_obj
                and crit_rdm < config.eps_rdm):
            converged = True
            break

    return x, -fx, H, it, converged, (crit_step, crit_obj, crit_rdm)


def _rdm(g: np.ndarray, H: np.ndarray, n_units: int) -> float:
    """Relative distance to the maximum: g^T H^{-1} g / p, in units of n."""
    try:
        sol = np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.inf
    val = float(g @ sol) / g.size
    return abs(val)


def standard_errors(H: np.ndarray) -> np.ndarray:
    """Asymptotic standard errors from the Hessian of the negative loglik.

    Entries whose variance estimate is not positive come back as NaN rather
    than raising: a boundary solution should not lose the whole fit.
    """
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(H.shape[0], np.nan)
    var = np.diag(cov).copy()
    var[var <= 0] = np.nan
    return np.sqrt(var)


# ---------------------------------------------------------------------------
# Staged initialization
# ---------------------------------------------------------------------------


def default_start(spec: ModelSpec, dataset: Dataset) -> np.ndarray:
    """Data-driven starting point: moment-matched links, zero dynamics."""
    theta = unpack(np.zeros(spec.n_params()), spec)
    # Within-dimension rate and baseline-rate couplings start small; the
    # fixed-one diagonal of the baseline block carries the initial variance.
    theta.l_params[:] = 0.1
    theta.sigma[:] = 0.5
    for k, mk in enumerate(spec.markers):
        y = dataset.marker_values(k)
        mu, sd = float(np.mean(y)), float(np.std(y))
        sd = sd if sd > 0 else 1.0
        if mk.link.family == "linear":
            theta.eta[k] = np.array([mu, sd])
        else:
            # squared weights summing roughly to the observed range
            n_w = mk.link.n_eta - 1
            span = float(np.max(y) - np.min(y)) / max(sd, 1e-8)
            w = np.sqrt(max(span, 1e-3) / n_w)
            theta.eta[k] = np.concatenate([[(np.min(y) - mu) / sd], np.full(n_w, w)])
    return pack(theta, spec)


def _restrict_to_dimension(spec: ModelSpec, d: int):
    """Single-dimension spec plus the index maps into the full flat vector."""
    from .modelspec import InfluenceSpec, MarkerSpec, ModelSpec as MS

    markers = tuple(MarkerSpec(mk.name, 0, mk.link)
                    for mk in spec.markers if mk.dimension == d)
    sub = MS(
        dimensions=1,
        markers=markers,
        delta=spec.delta,
        grid_len=spec.grid_len,
        baseline_covariates=(spec.baseline_covariates[d],),
        trend_covariates=(spec.trend_covariates[d],),
        random_effects=(spec.random_effects[d],),
        influence=InfluenceSpec(
            regressors=spec.influence.regressors,
            time_basis_knots=spec.influence.time_basis_knots,
            has_time_basis=spec.influence.has_time_basis,
            diag_time_varying=(spec.influence.diag_time_varying[d],)
            if spec.influence.diag_time_varying else (),
        ),
        u_correlated=False,
    )
    return sub


def _sub_dataset(dataset: Dataset, spec: ModelSpec, d: int) -> Dataset:
    from .data import Occasion, SubjectData

    keep = np.array([mk.dimension == d for mk in spec.markers])
    idx = np.flatnonzero(keep)
    subjects = []
    for s in dataset.subjects:
        occs = []
        for occ in s.occasions:
            mask = occ.mask[idx]
            if mask.any():
                occs.append(Occasion(j=occ.j, mask=mask, values=occ.values[idx],
                                     time=occ.time))
        if occs:
            subjects.append(SubjectData(id=s.id, covariates=s.covariates,
                                        occasions=occs))
    names = tuple(n for n, k in zip(dataset.marker_names, keep) if k)
    return Dataset(subjects, names, dataset.covariate_names)


def staged_init(spec: ModelSpec, dataset: Dataset,
                config: FitConfig | None = None) -> np.ndarray:
    """Starting point from independent per-dimension univariate fits.

    Each latent dimension is fitted on its own markers with the influence
    matrix reduced to the diagonal entry; cross-dimension parameters start
    at zero. Falls back to the plain data-driven start when a univariate
    fit fails.
    """
    cfg = config or FitConfig(max_iters=60)
    flat = default_start(spec, dataset)
    theta = unpack(flat, spec)
    name_pos = {n: i for i, n in enumerate(spec.parameter_names())}

    for d in range(spec.dimensions):
        sub = _restrict_to_dimension(spec, d)
        subdata = _sub_dataset(dataset, spec, d)
        try:
            ev = Evaluator(subdata, sub)
            x0 = default_start(sub, subdata)
            x, _, _, _, _, _ = lm_maximize(ev.loglik, x0, cfg, n_units=len(subdata))
        except Exception:
            continue
        sub_theta = unpack(x, sub)
        theta.beta[_slice_for(spec.baseline_covariates, d)] = sub_theta.beta
        theta.gamma[_slice_for(spec.trend_covariates, d)] = sub_theta.gamma
        # own-dimension L entries, matched by name pattern
        free_full, _ = spec.l_structure()
        free_sub, _ = sub.l_structure()
        sub_rows = _l_rows_for_dim(spec, d)
        vals = dict(zip(free_sub, sub_theta.l_params))
        for m, (i, j) in enumerate(free_full):
            key = sub_rows.get((i, j))
            if key is not None and key in vals:
                theta.l_params[m] = vals[key]
        theta.alpha[d, d, :] = sub_theta.alpha[0, 0, :]
        for k, mk in enumerate(spec.markers):
            if mk.dimension != d:
                continue
            sk = [m.name for m in sub.markers].index(mk.name)
            theta.sigma[k] = sub_theta.sigma[sk]
            theta.eta[k] = sub_theta.eta[sk]
    return pack(theta, spec)


def _slice_for(per_dim, d):
    start = sum(len(c) for c in per_dim[:d])
    return slice(start, start + len(per_dim[d]))


def _l_rows_for_dim(spec: ModelSpec, d: int):
    """Map full-spec L entries of dimension d to the univariate spec's entries."""
    D, qd = spec.dimensions, spec.q_per_dim
    offs = np.concatenate([[0], np.cumsum(qd)])
    out = {}
    base = D + offs[d]
    for c in range(qd[d]):
        row = base + c
        out[(row, d)] = (1 + c, 0)
        for j in range(base, row + 1):
            out[(row, j)] = (1 + c, 1 + (j - base))
    return out


# ---------------------------------------------------------------------------
# Front door
# ---------------------------------------------------------------------------


def fit(spec: ModelSpec, dataset: Dataset, start: np.ndarray | None = None,
        config: FitConfig | None = None, staged: bool = True) -> FitResult:
    """Fit the model to a dataset and return estimates with standard errors."""
    config = config or FitConfig()
    ev = Evaluator(dataset, spec)
    if start is None:
        start = staged_init(spec, dataset) if staged else default_start(spec, dataset)
    x, ll, H, iters, converged, crits = lm_maximize(
        ev.loglik, np.asarray(start, dtype=float), config, n_units=len(dataset))
    return FitResult(
        theta_hat=x,
        se=standard_errors(H),
        loglik=ll,
        n_params=spec.n_params(),
        n_subjects=len(dataset),
        iterations=iters,
        converged=converged,
        crit_step=crits[0],
        crit_obj=crits[1],
        crit_rdm=crits[2],
        parameter_names=spec.parameter_names(),
    )
