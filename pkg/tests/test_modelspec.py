import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynlat.modelspec import (InfluenceSpec, LinkSpec, MarkerSpec, ModelSpec,
                              SpecError, assemble_B, assemble_L, build_design,
                              pack, unpack)


def test_s2_structure_free_l_entries(s2_pair):
    spec, _ = s2_pair
    free, ones = spec.l_structure()
    # rows/cols 0-based; published labels are 1-based: L(3,1), L(3,3), L(4,2), L(4,4)
    assert free == [(2, 0), (2, 2), (3, 1), (3, 3)]
    assert ones == [(0, 0), (1, 1)]
    assert spec.n_params() == 24


def test_s1_structure_adds_u_correlation():
    from dynlat.simstudies import scenario_s1

    spec, _ = scenario_s1()
    free, _ = spec.l_structure()
    assert (1, 0) in free  # L(2,1)
    assert spec.n_params() == 29


def test_parameter_names_layout(s2_pair):
    spec, _ = s2_pair
    names = spec.parameter_names()
    assert len(names) == 24
    assert names[0] == "beta1_C2"
    assert "L(3,1)" in names and "L(4,4)" in names
    assert "alpha12_1" in names and "alpha22_0" in names
    assert names[-1] == "eta_Y2_1"


def test_alpha_mask_diagonal_not_time_varying(s2_pair):
    spec, _ = s2_pair
    mask = spec.alpha_free_mask()
    assert mask.shape == (2, 2, 4)
    assert mask[0, 0].tolist() == [True, False, False, False]
    assert mask[0, 1].all() and mask[1, 0].all()


def test_pack_unpack_roundtrip(s2_pair):
    spec, theta = s2_pair
    flat = pack(theta, spec)
    theta2 = unpack(flat, spec)
    np.testing.assert_array_equal(pack(theta2, spec), flat)


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_pack_unpack_bijective_on_random_vectors(seed):
    from dynlat.simstudies import scenario_s2

    spec, _ = scenario_s2()
    flat = np.random.default_rng(seed).normal(size=spec.n_params())
    np.testing.assert_array_equal(pack(unpack(flat, spec), spec), flat)


def test_assemble_B_positive_semidefinite(s2_pair):
    spec, theta = s2_pair
    B = assemble_B(theta.l_params, spec)
    assert np.all(np.linalg.eigvalsh(B) >= -1e-12)
    # baseline-effect diagonal fixed at one
    L = assemble_L(theta.l_params, spec)
    assert L[0, 0] == 1.0 and L[1, 1] == 1.0
    assert L[0, 1] == 0.0  # upper triangle empty


def test_u_correlation_example_values():
    """With L(2,1)=0.333 the baseline block is [[1, .333], [.333, 1+.333^2]]."""
    from dynlat.simstudies import scenario_s1

    spec, theta = scenario_s1()
    B = assemble_B(theta.l_params, spec)
    assert B[0, 0] == pytest.approx(1.0)
    assert B[1, 0] == pytest.approx(0.333)
    assert B[1, 1] == pytest.approx(1.0 + 0.333 ** 2)


def test_json_roundtrip(tmp_path, small_spec):
    path = tmp_path / "spec.json"
    small_spec.to_json(path)
    again = ModelSpec.from_json(path)
    assert again == small_spec


def test_schema_rejects_malformed_document(tmp_path, small_spec):
    doc = small_spec.to_dict()
    del doc["markers"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SpecError):
        ModelSpec.from_json(path)


def test_validation_errors():
    link = LinkSpec("linear")
    with pytest.raises(SpecError):
        ModelSpec(dimensions=2,
                  markers=(MarkerSpec("Y1", 0, link),),  # dimension 1 unmeasured
                  delta=1.0, grid_len=4,
                  baseline_covariates=((), ()),
                  trend_covariates=((), ()),
                  random_effects=((), ()))
    with pytest.raises(SpecError):
        LinkSpec("log")
    with pytest.raises(SpecError):
        InfluenceSpec(regressors=("C2",))  # intercept must come first


def test_baseline_intercept_rejected(small_spec):
    with pytest.raises(SpecError):
        ModelSpec(dimensions=1,
                  markers=(MarkerSpec("Y", 0, LinkSpec("linear")),),
                  delta=1.0, grid_len=3,
                  baseline_covariates=(("intercept",),),
                  trend_covariates=(("intercept",),),
                  random_effects=(("intercept",),))


def test_build_design_shapes_and_missing_covariate(small_spec):
    ds = build_design(small_spec, {"C1": 0.5, "C2": 1.0})
    assert ds.X0.shape == (2, 2)
    assert ds.X.shape == (5, 2, 3)
    assert ds.Z.shape == (5, 2, 2)
    assert ds.R.shape == (5, 2)
    # block structure: dimension rows only carry their own columns
    assert ds.X0[0, 1] == 0.0 and ds.X0[1, 0] == 0.0
    with pytest.raises(SpecError, match="covariate C1 not found"):
        build_design(small_spec, {"C2": 1.0})


def test_with_delta_preserves_horizon(small_spec):
    fine = small_spec.with_delta(0.5)
    assert fine.delta == 0.5
    assert fine.grid_len == 8
    assert fine.with_delta(1.0).grid_len == 4


def test_projection_matrix(small_spec):
    P = small_spec.projection_matrix()
    np.testing.assert_array_equal(P, np.eye(2))
