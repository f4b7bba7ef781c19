import numpy as np
import pytest

from dynlat.modelspec import (InfluenceSpec, LinkSpec, MarkerSpec, ModelSpec,
                              unpack)


@pytest.fixture
def s2_pair():
    from dynlat.simstudies import scenario_s2

    return scenario_s2()


@pytest.fixture
def small_spec():
    """Bivariate spec with one linear and one I-spline marker."""
    return ModelSpec(
        dimensions=2,
        markers=(MarkerSpec("Y1", 0, LinkSpec("linear")),
                 MarkerSpec("Y2", 1, LinkSpec("ispline", 1))),
        delta=1.0,
        grid_len=4,
        baseline_covariates=(("C1",), ("C1",)),
        trend_covariates=(("intercept",), ("intercept", "C2")),
        random_effects=(("intercept",), ("intercept",)),
        influence=InfluenceSpec(regressors=("intercept", "C2")),
    )


def random_theta(spec, rng, scale=0.1):
    theta = unpack(rng.normal(0.0, scale, spec.n_params()), spec)
    theta.sigma = rng.uniform(0.3, 0.8, spec.n_markers)
    for k, mk in enumerate(spec.markers):
        if mk.link.family == "linear":
            theta.eta[k] = np.array([rng.normal(2.0, 1.0), rng.uniform(1.0, 3.0)])
        else:
            theta.eta[k] = np.concatenate([
                [rng.normal(0.0, 0.5)], rng.uniform(0.3, 1.0, mk.link.n_eta - 1)])
    return theta
