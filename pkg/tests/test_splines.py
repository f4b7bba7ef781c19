import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from dynlat.splines import (augmented_knots, bspline_basis, ispline_basis,
                            mspline_basis)


def naive_bspline(x, t, i, k):
    """Textbook recursive Cox-de Boor evaluation of N_{i,k} at scalar x."""
    if k == 1:
        if t[i] <= x < t[i + 1]:
            return 1.0
        # closed right boundary of the final non-empty interval
        if x == t[-1] and t[i] < t[i + 1] == t[-1]:
            return 1.0
        return 0.0
    out = 0.0
    d1 = t[i + k - 1] - t[i]
    if d1 > 0:
        out += (x - t[i]) / d1 * naive_bspline(x, t, i, k - 1)
    d2 = t[i + k] - t[i + 1]
    if d2 > 0:
        out += (t[i + k] - x) / d2 * naive_bspline(x, t, i + 1, k - 1)
    return out


INTERNAL = (0.4, 0.7)
BOUNDARY = (0.0, 1.0)


def test_bspline_matches_naive_recursion():
    t = augmented_knots(INTERNAL, BOUNDARY, 3)
    xs = np.linspace(0.0, 1.0, 37)
    basis, clamped = bspline_basis(xs, INTERNAL, BOUNDARY)
    assert not clamped.any()
    for a, x in enumerate(xs):
        for i in range(basis.shape[1]):
            assert basis[a, i] == pytest.approx(naive_bspline(x, t, i, 3),
                                                abs=1e-12)


def test_bspline_partition_of_unity():
    xs = np.linspace(0.0, 1.0, 101)
    basis, _ = bspline_basis(xs, INTERNAL, BOUNDARY)
    np.testing.assert_allclose(basis.sum(axis=1), 1.0, atol=1e-12)


def test_bspline_clamps_outside_boundary():
    basis, clamped = bspline_basis([-0.5, 0.5, 1.5], INTERNAL, BOUNDARY)
    assert clamped.tolist() == [True, False, True]
    inside, _ = bspline_basis([0.0, 1.0], INTERNAL, BOUNDARY)
    np.testing.assert_allclose(basis[[0, 2]], inside, atol=1e-14)


def test_mspline_integrates_to_one():
    for m in range(mspline_basis(np.array([0.5]), INTERNAL, BOUNDARY).shape[1]):
        val, _ = quad(lambda x: mspline_basis(np.array([x]), INTERNAL,
                                              BOUNDARY)[0, m], 0.0, 1.0,
                      limit=200)
        assert val == pytest.approx(1.0, abs=1e-8)


def test_ispline_is_integral_of_mspline():
    xs = np.linspace(0.05, 0.95, 7)
    I = ispline_basis(xs, INTERNAL, BOUNDARY)
    for a, x in enumerate(xs):
        for m in range(I.shape[1]):
            val, _ = quad(lambda u: mspline_basis(np.array([u]), INTERNAL,
                                                  BOUNDARY)[0, m], 0.0, x,
                          limit=200)
            assert I[a, m] == pytest.approx(val, abs=1e-8)


def test_ispline_boundary_values():
    I = ispline_basis(np.array([0.0, 1.0]), INTERNAL, BOUNDARY)
    np.testing.assert_allclose(I[0], 0.0, atol=1e-12)
    np.testing.assert_allclose(I[1], 1.0, atol=1e-12)


@settings(deadline=None, max_examples=40)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=30))
def test_ispline_monotone_nondecreasing(xs):
    xs = np.sort(np.asarray(xs))
    I = ispline_basis(xs, INTERNAL, BOUNDARY)
    assert np.all(np.diff(I, axis=0) >= -1e-12)


def test_augmented_knots_rejects_bad_input():
    with pytest.raises(ValueError):
        augmented_knots((1.5,), (0.0, 1.0), 3)
    with pytest.raises(ValueError):
        augmented_knots((), (1.0, 0.0), 3)
