"""End-to-end acceptance suite.

Each test pins one headline guarantee of the package: closed-form moments
against an independent Monte-Carlo oracle, frequentist calibration of the
full estimation pipeline, type-I error control of the influence Wald tests
across discretization steps, exactness of the step conversions, the
measurement-model contracts, optimizer sanity and bitwise determinism.

The two simulation studies re-run hundreds of full fits and carry the
``slow`` marker; deselect them with ``-m "not slow"`` for a quick pass.
"""

import numpy as np
import pytest

from dynlat.data import Dataset, Occasion, SubjectData, write_long_csv
from dynlat.likelihood import gaussian_logdensity, subject_moments
from dynlat.measurement import LinkFunction
from dynlat.modelspec import (InfluenceSpec, LinkSpec, MarkerSpec, ModelSpec,
                              assemble_L, build_design, pack, unpack)
from dynlat.optimizer import FitConfig, fit, lm_maximize
from dynlat.simstudies import (ScenarioConfig, generate, run_coverage_study,
                               run_type1_study, scenario_s2,
                               scenario_three_process)
from dynlat.stepconv import (coarse_to_fine, fine_to_coarse,
                             influence_from_continuous)
from dynlat.structural import (forward_recursion, latent_mean, latent_moments,
                               transition_matrices)

N_MC_DRAWS = 200_000


# ---------------------------------------------------------------------------
# 1. Closed-form latent moments against independent oracles
# ---------------------------------------------------------------------------


def _random_spec_theta(rng):
    """Random small system: up to three processes, up to twelve grid steps."""
    D = int(rng.integers(1, 4))
    J = int(rng.integers(1, 13))
    delta = float(rng.choice([0.25, 0.5, 1.0]))
    markers = tuple(MarkerSpec(f"Y{d + 1}", d, LinkSpec("linear"))
                    for d in range(D))
    base = tuple(tuple(["C2"] if rng.random() < 0.5 else []) for _ in range(D))
    trend = tuple(tuple(["intercept"] + (["C1"] if rng.random() < 0.5 else []))
                  for _ in range(D))
    regs = ("intercept", "C2") if rng.random() < 0.5 else ("intercept",)
    spec = ModelSpec(
        dimensions=D, markers=markers, delta=delta, grid_len=J,
        baseline_covariates=base, trend_covariates=trend,
        random_effects=tuple(("intercept",) for _ in range(D)),
        influence=InfluenceSpec(regressors=regs),
        u_correlated=bool(rng.random() < 0.5),
    )
    theta = unpack(rng.normal(0.0, 0.05, spec.n_params()), spec)
    theta.beta = rng.normal(0.0, 1.0, theta.beta.shape)
    theta.gamma = rng.normal(0.0, 0.1, theta.gamma.shape)
    theta.sigma = np.abs(theta.sigma) + 0.3
    covs = {"C1": float(rng.normal(0.0, 0.8)), "C2": float(rng.integers(0, 2))}
    return spec, theta, covs


def _mc_covariance(spec, theta, design, rng, ndraws):
    """Sample covariance of the stacked latent path over recursion draws.

    The design is fixed, so all draws share the transition matrices and the
    recursion vectorizes over draws; only the random effects vary.
    """
    D, q, J = spec.dimensions, spec.n_random, spec.grid_len
    L = assemble_L(theta.l_params, spec)
    uv = rng.standard_normal((ndraws, D + q)) @ L.T
    lam = design.X0 @ theta.beta + uv[:, :D]
    trans = transition_matrices(design, theta, spec)
    out = np.empty((ndraws, (J + 1) * D))
    out[:, :D] = lam
    for j in range(J):
        drift = design.X[j + 1] @ theta.gamma + uv[:, D:] @ design.Z[j + 1].T
        lam = lam @ trans[j].T + spec.delta * drift
        out[:, (j + 1) * D:(j + 2) * D] = lam
    return np.cov(out.T).reshape(((J + 1) * D, (J + 1) * D))


def test_latent_moments_match_recursion_and_monte_carlo():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        spec, theta, covs = _random_spec_theta(rng)
        design = build_design(spec, covs)

        # mean: closed form against the defining recursion at zero effects
        mu = latent_mean(design, theta, spec)
        path = forward_recursion(design, theta, spec,
                                 np.zeros(spec.dimensions),
                                 np.zeros(spec.n_random))
        np.testing.assert_allclose(mu, path, atol=1e-10)

        # covariance: closed form against the Monte-Carlo sample covariance
        V = latent_moments(design, theta, spec).V
        S = _mc_covariance(spec, theta, design, rng, N_MC_DRAWS)
        rel = np.linalg.norm(S - V) / np.linalg.norm(V)
        assert rel < 0.02


# ---------------------------------------------------------------------------
# 2. Frequentist calibration of the full estimation pipeline
# ---------------------------------------------------------------------------


def _check_calibration(report):
    names = report.parameter_names
    true = report.theta_true
    assert report.n_converged >= 95
    for i, name in enumerate(names):
        assert 88.0 <= report.coverage_pct[i] <= 100.0, \
            f"{name}: coverage {report.coverage_pct[i]:.1f}%"
        if abs(true[i]) >= 0.05:
            assert abs(report.rel_bias_pct[i]) <= 10.0, \
                f"{name}: relative bias {report.rel_bias_pct[i]:.1f}%"
        ratio = report.ese[i] / report.mean_ase[i]
        assert 0.7 <= ratio <= 1.3, f"{name}: ESE/ASE {ratio:.2f}"


@pytest.mark.slow
def test_coverage_study_complete_data():
    report = run_coverage_study(ScenarioConfig(
        scenario="s2", n_subjects=512, replicates=100, seed=20260823))
    _check_calibration(report)


@pytest.mark.slow
def test_coverage_study_with_missingness():
    report = run_coverage_study(ScenarioConfig(
        scenario="s2", n_subjects=512, replicates=100, seed=20260823,
        p_visit=0.15, p_marker=0.07))
    _check_calibration(report)


# ---------------------------------------------------------------------------
# 3. Type-I error of the influence Wald tests under coarse refits
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_type1_error_of_influence_tests():
    report = run_type1_study(
        ScenarioConfig(replicates=200, n_subjects=512, seed=20260823),
        delta_fit=0.5)
    for name, rate in report.rejection_rates.items():
        # exact binomial: 200 draws at the nominal 5% stay inside these
        # bounds with probability above 99.8% per entry
        assert 1.4 <= rate <= 9.5, f"{name}: rejection rate {rate:.1f}%"


# ---------------------------------------------------------------------------
# 4. Discretization-step conversions
# ---------------------------------------------------------------------------


def _stable_matrix(rng, D):
    """Influence matrix keeping I + delta*A well inside the stable region."""
    A = rng.normal(0.0, 0.08, (D, D))
    A -= np.eye(D) * (0.05 + abs(rng.normal(0.0, 0.05)))
    return A


def test_step_conversion_round_trips():
    rng = np.random.default_rng(41)
    for _ in range(100):
        D = int(rng.integers(1, 4))
        rho = int(rng.choice([2, 3, 4, 8]))
        delta_star = float(rng.choice([0.5, 1.0, 2.0]))
        A = _stable_matrix(rng, D)
        A_star = fine_to_coarse(A, delta_star, rho)
        back = coarse_to_fine(A_star, delta_star, rho)
        np.testing.assert_allclose(back, A, atol=1e-10)
        forward = fine_to_coarse(back, delta_star, rho)
        np.testing.assert_allclose(forward, A_star, atol=1e-10)


def test_fine_to_coarse_converges_to_continuous_limit():
    A = scenario_three_process().A_cont
    target = influence_from_continuous(A, 1.0)
    errs = [np.linalg.norm(fine_to_coarse(A, 1.0, rho) - target)
            for rho in (10, 100, 1000)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-4


def test_scalar_conversion_is_exact():
    assert fine_to_coarse(np.array([[-0.2]]), 1.0, 2)[0, 0] == \
        pytest.approx(-0.19, abs=1e-12)
    assert coarse_to_fine(np.array([[-0.19]]), 1.0, 2)[0, 0] == \
        pytest.approx(-0.2, abs=1e-12)


# ---------------------------------------------------------------------------
# 5. Measurement model
# ---------------------------------------------------------------------------


def _random_ispline_link(rng):
    internal = tuple(sorted(rng.uniform(1.0, 9.0, int(rng.integers(1, 4)))))
    eta = np.concatenate([[rng.normal()], rng.normal(0.3, 0.4, len(internal) + 3)])
    return LinkFunction("ispline", eta, (internal, (0.0, 10.0)))


def test_links_are_monotone_with_correct_jacobian_and_inverse():
    rng = np.random.default_rng(7)
    grid = np.linspace(0.0, 10.0, 400)
    for _ in range(20):
        link = _random_ispline_link(rng)
        vals = link.transform(grid)
        assert np.all(np.diff(vals) >= -1e-12)

        inner = grid[5:-5]
        h = 1e-6
        fd = (link.transform(inner + h) - link.transform(inner - h)) / (2 * h)
        jac = link.jacobian(inner)
        np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-8)

        y = rng.uniform(0.5, 9.5, 50)
        back = link.inverse(link.transform(y))
        np.testing.assert_allclose(back, y, atol=1e-8 * 10.0)


def test_masked_markers_equal_deleted_markers():
    """Masking an observation must equal removing it from the model, exactly."""
    spec, theta = scenario_s2()
    data = generate(spec, theta, 6, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    for subj in data.subjects:
        occs, kept = [], []
        for occ in subj.occasions:
            mask = rng.random(2) < 0.7
            kept.append(mask)  # all-false rows select nothing from the full moments
            if not mask.any():
                continue
            occs.append(Occasion(j=occ.j, mask=mask,
                                 values=np.where(mask, occ.values, np.nan),
                                 time=occ.time))
        masked = SubjectData(subj.id, subj.covariates, occs)
        mm_full = subject_moments(theta, subj, spec)
        mm_masked = subject_moments(theta, masked, spec)

        # rows of the full mean/covariance at the kept positions
        flat_keep = np.concatenate(kept) if kept else np.zeros(0, dtype=bool)
        idx = np.flatnonzero(flat_keep)
        assert np.array_equal(mm_masked.mu, mm_full.mu[idx])
        assert np.array_equal(mm_masked.V, mm_full.V[np.ix_(idx, idx)])

        obs = np.concatenate([o.values[o.mask] for o in occs])
        ytil = np.array([
            (obs[a] - theta.eta[k][0]) / theta.eta[k][1]
            for a, k in enumerate(
                k for o in occs for k in np.flatnonzero(o.mask))])
        ll_masked = gaussian_logdensity(ytil, mm_masked.mu, mm_masked.V)
        ll_sliced = gaussian_logdensity(ytil, mm_full.mu[idx],
                                        mm_full.V[np.ix_(idx, idx)])
        assert ll_masked == ll_sliced


# ---------------------------------------------------------------------------
# 6. Optimizer sanity
# ---------------------------------------------------------------------------


def test_quadratic_objective_converges_in_three_iterations():
    Q = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 3.0]])
    opt = np.array([0.5, -1.0, 2.0])

    def f(xs):
        d = xs - opt
        return -0.5 * np.einsum("bi,ij,bj->b", d, Q, d)

    x, val, _, iters, converged, _ = lm_maximize(f, np.zeros(3))
    assert converged and iters <= 3
    np.testing.assert_allclose(x, opt, atol=1e-6)


def test_staged_fit_recovers_truth_at_scale():
    spec, theta = scenario_s2()
    flat_true = pack(theta, spec)
    data = generate(spec, theta, 512, np.random.default_rng([77, 0]))
    res = fit(spec, data, config=FitConfig(max_iters=200), staged=True)
    assert res.converged
    dev = np.abs(res.theta_hat - flat_true) / res.se
    assert np.all(dev < 3.0), \
        f"worst deviation {dev.max():.2f} ASE at {res.parameter_names[int(dev.argmax())]}"


# ---------------------------------------------------------------------------
# 7. Determinism
# ---------------------------------------------------------------------------


def test_simulation_and_fit_are_bitwise_reproducible(tmp_path):
    spec, theta = scenario_s2()

    paths = []
    for name in ("a", "b"):
        data = generate(spec, theta, 50, np.random.default_rng(99))
        p = tmp_path / f"{name}.csv"
        write_long_csv(data, p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()

    data = generate(spec, theta, 50, np.random.default_rng(99))
    results = [fit(spec, data, start=pack(theta, spec),
                   config=FitConfig(max_iters=100), staged=False)
               for _ in range(2)]
    assert np.array_equal(results[0].theta_hat, results[1].theta_hat)
    assert np.array_equal(results[0].se, results[1].se)
    assert results[0].loglik == results[1].loglik


def test_study_is_bitwise_identical_across_worker_counts():
    cfg = ScenarioConfig(scenario="s2", n_subjects=40, replicates=3, seed=5)
    one = run_coverage_study(cfg, max_iters=60, workers=1)
    four = run_coverage_study(cfg, max_iters=60, workers=4)
    assert np.array_equal(one.estimates, four.estimates)
    assert np.array_equal(one.mean_ase, four.mean_ase)
    assert np.array_equal(one.coverage_pct, four.coverage_pct)
