"""Scenario generators, MCAR missingness, and the two simulation studies.

The builders return (spec, theta_true) pairs for the bivariate scenarios and
the three-process near-continuous system. `generate` draws covariates and
random effects, runs the forward recursion at the generation step and emits
affine marker observations on the visit schedule. The coverage study refits
a known truth over replicates and tabulates bias, ESE, ASE and coverage;
the type-I study generates under continuous-time dynamics with one influence
entry zeroed, fits at a coarse step and records Wald rejections of that entry.

Replicates use independent RNG streams keyed by (seed, replicate index), so
aggregation does not depend on evaluation order or worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Occasion, SubjectData, regrid
from .modelspec import (InfluenceSpec, LinkSpec, MarkerSpec, ModelSpec, SpecError,
                        Theta, assemble_L, build_design, pack, unpack)
from .optimizer import FitConfig, FitError, FitResult, fit
from .stepconv import influence_from_continuous, trend_from_continuous
from .structural import transition_matrices

C1_SD = 0.8        # C1 ~ Normal(0, 0.64)
C2_PROB = 0.37     # C2 ~ Bernoulli(0.37)


@dataclass
class ScenarioConfig:
    scenario: str = "s2"
    n_subjects: int = 512
    replicates: int = 100
    seed: int = 0
    delta_gen: float | None = None
    obs_times: tuple[float, ...] | None = None
    p_visit: float = 0.0
    p_marker: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.p_visit <= 1.0 and 0.0 <= self.p_marker <= 1.0):
            raise SpecError("missingness probabilities must lie in [0, 1]")
        if self.delta_gen is not None and not self.delta_gen > 0:
            raise SpecError("delta_gen must be > 0")


# ---------------------------------------------------------------------------
# Scenario builders
# ---------------------------------------------------------------------------


def scenario_s2() -> tuple[ModelSpec, Theta]:
    """Bivariate system with B-spline time-varying cross influences."""
    spec = ModelSpec(
        dimensions=2,
        markers=(MarkerSpec("Y1", 0, LinkSpec("linear")),
                 MarkerSpec("Y2", 1, LinkSpec("linear"))),
        delta=1.0,
        grid_len=6,
        baseline_covariates=(("C2",), ("C2",)),
        trend_covariates=(("intercept",), ("intercept",)),
        random_effects=(("intercept",), ("intercept",)),
        influence=InfluenceSpec(regressors=("intercept",),
                                time_basis_knots=(3.0,),
                                diag_time_varying=(False, False)),
    )
    theta = unpack(np.zeros(spec.n_params()), spec)
    theta.beta = np.array([-1.635, -1.784])
    theta.gamma = np.array([0.009, -0.053])
    # free entries row-major: L(3,1), L(3,3), L(4,2), L(4,4)
    theta.l_params = np.array([0.032, 0.094, -0.011, 0.169])
    theta.alpha[0, 0, 0] = -0.012
    theta.alpha[0, 1] = [0.115, -0.092, -0.028, -0.069]
    theta.alpha[1, 0] = [0.134, -0.076, 0.024, -0.140]
    theta.alpha[1, 1, 0] = 0.009
    theta.sigma = np.array([0.376, 0.686])
    theta.eta = [np.array([3.878, 2.678]), np.array([2.589, 1.472])]
    return spec, theta


def scenario_s1() -> tuple[ModelSpec, Theta]:
    """Bivariate system with covariate-specific influences and correlated u.

    The structure follows the published scenario (covariate effects on level
    and trend, influence entries shifted by the binary covariate, baseline
    random effects correlated across dimensions); the generating values
    besides L(2,1) are plausible stand-ins of matching magnitude.
    """
    spec = ModelSpec(
        dimensions=2,
        markers=(MarkerSpec("Y1", 0, LinkSpec("linear")),
                 MarkerSpec("Y2", 1, LinkSpec("linear"))),
        delta=1.0,
        grid_len=6,
        baseline_covariates=(("C1", "C2"), ("C1", "C2")),
        trend_covariates=(("intercept", "C1", "C2"),
                          ("intercept", "C1", "C2")),
        random_effects=(("intercept",), ("intercept",)),
        influence=InfluenceSpec(regressors=("intercept", "C2")),
        u_correlated=True,
    )
    theta = unpack(np.zeros(spec.n_params()), spec)
    theta.beta = np.array([-0.30, -1.60, -0.25, -1.70])
    theta.gamma = np.array([0.010, -0.020, -0.050, -0.050, -0.030, -0.060])
    # free entries row-major: L(2,1), L(3,1), L(3,3), L(4,2), L(4,4)
    theta.l_params = np.array([0.333, 0.030, 0.090, -0.010, 0.170])
    theta.alpha[0, 0] = [-0.010, 0.020]
    theta.alpha[0, 1] = [0.110, -0.090]
    theta.alpha[1, 0] = [0.130, -0.080]
    theta.alpha[1, 1] = [0.010, 0.020]
    theta.sigma = np.array([0.376, 0.686])
    theta.eta = [np.array([3.878, 2.678]), np.array([2.589, 1.472])]
    return spec, theta


@dataclass(frozen=True)
class ThreeProcessTruth:
    """Continuous-time generating values for the discretization study."""

    A_cont: np.ndarray
    gamma: np.ndarray
    l_params: np.ndarray
    sigma: np.ndarray
    eta: tuple[tuple[float, float], ...]


def three_process_spec(delta: float, horizon: float = 6.0) -> ModelSpec:
    """Three processes, one affine marker each, intercept-only structure."""
    grid_len = int(round(horizon / delta))
    return ModelSpec(
        dimensions=3,
        markers=(MarkerSpec("Y1", 0, LinkSpec("linear")),
                 MarkerSpec("Y2", 1, LinkSpec("linear")),
                 MarkerSpec("Y3", 2, LinkSpec("linear"))),
        delta=delta,
        grid_len=grid_len,
        baseline_covariates=((), (), ()),
        trend_covariates=(("intercept",), ("intercept",), ("intercept",)),
        random_effects=(("intercept",), ("intercept",), ("intercept",)),
        influence=InfluenceSpec(regressors=("intercept",)),
    )


def scenario_three_process() -> ThreeProcessTruth:
    """Stable continuous-time system with mild cross influences."""
    A_cont = np.array([
        [-0.13, 0.09, 0.03],
        [0.16, -0.10, 0.06],
        [0.05, 0.12, -0.11],
    ])
    return ThreeProcessTruth(
        A_cont=A_cont,
        gamma=np.array([0.010, -0.050, -0.040]),
        # row-major free entries: (L(4,1), L(4,4)), (L(5,2), L(5,5)), (L(6,3), L(6,6))
        l_params=np.array([0.030, 0.120, -0.010, 0.150, 0.020, 0.100]),
        sigma=np.array([0.38, 0.69, 0.50]),
        eta=((3.9, 2.7), (2.6, 1.5), (1.0, 1.3)),
    )


def three_process_theta(spec: ModelSpec, truth: ThreeProcessTruth,
                        A_cont: np.ndarray | None = None) -> Theta:
    """Truth mapped onto a spec at the spec's own step.

    Uses the continuous-to-discrete conversions for the influence matrix
    and the trend, so the induced occasion-level law matches the continuous
    system up to the first-order generation error.
    """
    A = truth.A_cont if A_cont is None else A_cont
    theta = unpack(np.zeros(spec.n_params()), spec)
    theta.gamma = trend_from_continuous(truth.gamma, A, spec.delta)
    theta.l_params = truth.l_params.copy()
    theta.alpha[:, :, 0] = influence_from_continuous(A, spec.delta)
    theta.sigma = truth.sigma.copy()
    theta.eta = [np.asarray(e, dtype=float) for e in truth.eta]
    return theta


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def _draw_covariates(names, n, rng):
    out = {}
    for name in names:
        if name == "C1":
            out[name] = rng.normal(0.0, C1_SD, n)
        elif name == "C2":
            out[name] = (rng.random(n) < C2_PROB).astype(float)
        else:
            raise SpecError(f"no generator defined for covariate {name!r}")
    return out


def generate(spec: ModelSpec, theta: Theta, n_subjects: int, rng,
             obs_times=None, delta_gen: float | None = None) -> Dataset:
    """One simulated dataset with every scheduled marker observed.

    Trajectories run on the generation grid (step `delta_gen`, default the
    spec's own step); markers are emitted at `obs_times` (default: the
    spec's grid) through the affine links with Gaussian measurement noise.
    """
    for mk in spec.markers:
        if mk.link.family != "linear":
            raise SpecError("the generator emits affine markers only")
    gen_spec = spec if delta_gen is None or delta_gen == spec.delta \
        else spec.with_delta(delta_gen)
    if obs_times is None:
        obs_times = spec.time_grid
    obs_times = np.asarray(obs_times, dtype=float)
    obs_j = np.round(obs_times / gen_spec.delta).astype(int)
    if obs_j.max() > gen_spec.grid_len:
        raise SpecError("observation times fall beyond the generation grid")

    D, K, q = spec.dimensions, spec.n_markers, spec.n_random
    names = _covariate_names(spec)
    covs = _draw_covariates(names, n_subjects, rng)
    Lmat = assemble_L(theta.l_params, spec)
    uv = rng.standard_normal((n_subjects, D + q)) @ Lmat.T
    eps = rng.normal(0.0, 1.0, (n_subjects, obs_times.size, K)) * theta.sigma

    # Influence regressors that vary only with time let every subject share
    # the transition matrices: one vectorized recursion over subjects.
    shared = all(r == "intercept" for r in spec.influence.regressors)
    eta0 = np.array([theta.eta[k][0] for k in range(K)])
    eta1 = np.array([theta.eta[k][1] for k in range(K)])
    dims = np.array([mk.dimension for mk in spec.markers])

    if shared:
        ds0 = build_design(gen_spec, {n: 0.0 for n in names})
        trans = transition_matrices(ds0, theta, gen_spec)
        X0s = np.stack([_subject_design_X0(gen_spec, covs, i) for i in range(n_subjects)])
        lam = X0s @ theta.beta + uv[:, :D]
        drift_fix = ds0.X[0] @ theta.gamma
        drift = drift_fix[None, :] + uv[:, D:] @ ds0.Z[0].T
        keep = {int(j) for j in obs_j}
        stored = {}
        if 0 in keep:
            stored[0] = lam.copy()
        for j in range(gen_spec.grid_len):
            lam = lam @ trans[j].T + gen_spec.delta * drift
            if j + 1 in keep:
                stored[j + 1] = lam.copy()
        latent_at_obs = np.stack([stored[int(j)] for j in obs_j], axis=1)
    else:
        from .structural import forward_recursion

        latent_at_obs = np.empty((n_subjects, obs_times.size, D))
        for i in range(n_subjects):
            ds = build_design(gen_spec, {n: covs[n][i] for n in names})
            path = forward_recursion(ds, theta, gen_spec, uv[i, :D], uv[i, D:])
            latent_at_obs[i] = path[obs_j]

    y = eta0 + eta1 * (latent_at_obs[:, :, dims] + eps)

    width = len(str(n_subjects - 1))
    subjects = []
    for i in range(n_subjects):
        occasions = [
            Occasion(j=int(np.floor(t / spec.delta + 1e-9)),
                     mask=np.ones(K, dtype=bool),
                     values=y[i, a].copy(),
                     time=float(t))
            for a, t in enumerate(obs_times)
        ]
        subjects.append(SubjectData(id=f"s{i:0{width}d}",
                                    covariates={n: float(covs[n][i]) for n in names},
                                    occasions=occasions))
    return Dataset(subjects, spec.marker_names, tuple(names))


def _covariate_names(spec: ModelSpec):
    from .data import covariates_needed

    return covariates_needed(spec)


def _subject_design_X0(spec, covs, i):
    D = spec.dimensions
    out = np.zeros((D, spec.p0))
    col = 0
    for d, names in enumerate(spec.baseline_covariates):
        for name in names:
            out[d, col] = covs[name][i]
            col += 1
    return out


def apply_missingness(dataset: Dataset, p_visit: float = 0.15,
                      p_marker: float = 0.07, rng=None) -> Dataset:
    """MCAR thinning: drop non-baseline visits, then individual markers.

    The first occasion of each subject is always retained; occasions losing
    all their markers are removed.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    subjects = []
    for subj in dataset.subjects:
        occasions = []
        for a, occ in enumerate(subj.occasions):
            if a > 0 and rng.random() < p_visit:
                continue
            mask = occ.mask.copy()
            for k in np.flatnonzero(mask):
                if rng.random() < p_marker:
                    mask[k] = False
            if not mask.any():
                continue
            values = np.where(mask, occ.values, np.nan)
            occasions.append(Occasion(j=occ.j, mask=mask, values=values,
                                      time=occ.time))
        subjects.append(SubjectData(id=subj.id, covariates=subj.covariates,
                                    occasions=occasions))
    return Dataset(subjects, dataset.marker_names, dataset.covariate_names)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


@dataclass
class StudyReport:
    """Aggregated replicate results in the layout of the result tables."""

    parameter_names: list[str]
    theta_true: np.ndarray
    mean_estimate: np.ndarray
    rel_bias_pct: np.ndarray
    ese: np.ndarray
    mean_ase: np.ndarray
    coverage_pct: np.ndarray
    n_replicates: int
    n_converged: int
    rejection_rates: dict[str, float] = field(default_factory=dict)
    estimates: np.ndarray | None = None

    def rows(self):
        for i, name in enumerate(self.parameter_names):
            yield (name, float(self.theta_true[i]), float(self.mean_estimate[i]),
                   float(self.rel_bias_pct[i]), float(self.ese[i]),
                   float(self.mean_ase[i]), float(self.coverage_pct[i]))


def _scenario_pair(scenario: str):
    if scenario == "s1":
        return scenario_s1()
    if scenario == "s2":
        return scenario_s2()
    raise SpecError(f"unknown scenario {scenario!r}")


def _coverage_replicate(args):
    (scenario, n_subjects, seed, r, p_visit, p_marker, max_iters) = args
    spec, theta = _scenario_pair(scenario)
    rng = np.random.default_rng([seed, r])
    data = generate(spec, theta, n_subjects, rng)
    if p_visit or p_marker:
        data = apply_missingness(data, p_visit, p_marker, rng)
    start = pack(theta, spec)
    cfg = FitConfig(max_iters=max_iters)
    try:
        res = fit(spec, data, start=start, config=cfg, staged=False)
    except (FitError, np.linalg.LinAlgError):
        return r, None
    return r, res


def run_coverage_study(config: ScenarioConfig, max_iters: int = 200,
                       workers: int = 1) -> StudyReport:
    """Refit a known truth over replicates; tabulate bias, ESE, ASE, coverage.

    Replicate fits start at the generating values: the study measures the
    properties of the likelihood's consistent root, not of the staged
    initialization (the optimizer tests cover that separately).
    """
    spec, theta = _scenario_pair(config.scenario)
    flat_true = pack(theta, spec)
    jobs = [(config.scenario, config.n_subjects, config.seed, r,
             config.p_visit, config.p_marker, max_iters)
            for r in range(config.replicates)]
    results = _run_jobs(_coverage_replicate, jobs, workers)

    names = spec.parameter_names()
    return _aggregate_coverage(names, flat_true, results, config.replicates)


def _run_jobs(fn, jobs, workers):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(fn, jobs))
    else:
        results = dict(fn(job) for job in jobs)
    # replicate-index order, independent of completion order
    return [results[r] for r in sorted(results)]


def _aggregate_coverage(names, flat_true, results, n_replicates):
    fits = [res for res in results if res is not None and res.converged]
    if not fits:
        raise FitError("no replicate converged")
    est = np.stack([res.theta_hat for res in fits])
    ase = np.stack([res.se for res in fits])
    mean_est = est.mean(axis=0)
    ese = est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.zeros_like(mean_est)
    half = 1.959963984540054 * ase
    covered = np.abs(est - flat_true) <= half
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_bias = np.where(flat_true != 0,
                            100.0 * np.abs(mean_est - flat_true) / np.abs(flat_true),
                            np.nan)
    return StudyReport(
        parameter_names=list(names),
        theta_true=np.asarray(flat_true),
        mean_estimate=mean_est,
        rel_bias_pct=rel_bias,
        ese=ese,
        mean_ase=np.nanmean(ase, axis=0),
        coverage_pct=100.0 * covered.mean(axis=0),
        n_replicates=n_replicates,
        n_converged=len(fits),
        estimates=est,
    )


OFFDIAG_ENTRIES = tuple((d, e) for d in range(3) for e in range(3) if d != e)


def _type1_replicate(args):
    (entry, delta_fit, n_subjects, seed, arm, r, max_iters) = args
    truth = scenario_three_process()
    A0 = truth.A_cont.copy()
    A0[entry] = 0.0

    gen_spec = three_process_spec(0.001)
    gen_theta = unpack(np.zeros(gen_spec.n_params()), gen_spec)
    gen_theta.gamma = truth.gamma.copy()
    gen_theta.l_params = truth.l_params.copy()
    gen_theta.alpha[:, :, 0] = A0
    gen_theta.sigma = truth.sigma.copy()
    gen_theta.eta = [np.asarray(e, dtype=float) for e in truth.eta]

    rng = np.random.default_rng([seed, arm, r])
    obs_times = np.arange(7.0)
    data = generate(gen_spec, gen_theta, n_subjects, rng, obs_times=obs_times)

    fit_spec = three_process_spec(delta_fit)
    data = regrid(data, fit_spec)
    start_theta = three_process_theta(fit_spec, truth, A_cont=A0)
    cfg = FitConfig(max_iters=max_iters)
    try:
        res = fit(fit_spec, data, start=pack(start_theta, fit_spec),
                  config=cfg, staged=False)
    except (FitError, np.linalg.LinAlgError):
        return (arm, r), None
    if not res.converged:
        return (arm, r), None
    d, e = entry
    idx = fit_spec.parameter_names().index(f"alpha{d + 1}{e + 1}_0")
    z, p = res.wald(idx)
    return (arm, r), (p < 0.05)


def run_type1_study(config: ScenarioConfig, delta_fit: float = 0.5,
                    entries=OFFDIAG_ENTRIES, max_iters: int = 200,
                    workers: int = 1) -> StudyReport:
    """Wald rejection rates of influence entries zeroed in continuous time."""
    jobs = []
    for arm, entry in enumerate(entries):
        for r in range(config.replicates):
            jobs.append((entry, delta_fit, config.n_subjects, config.seed,
                         arm, r, max_iters))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_type1_replicate, jobs))
    else:
        results = dict(_type1_replicate(job) for job in jobs)

    rates, n_conv = {}, 0
    for arm, entry in enumerate(entries):
        flags = [results[(arm, r)] for r in range(config.replicates)]
        done = [f for f in flags if f is not None]
        n_conv += len(done)
        name = f"a{entry[0] + 1}{entry[1] + 1}"
        rates[name] = 100.0 * float(np.mean(done)) if done else np.nan
    empty = np.empty(0)
    return StudyReport(
        parameter_names=[], theta_true=empty, mean_estimate=empty,
        rel_bias_pct=empty, ese=empty, mean_ase=empty, coverage_pct=empty,
        n_replicates=len(entries) * config.replicates,
        n_converged=n_conv,
        rejection_rates=rates,
    )
