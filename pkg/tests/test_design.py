import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from msmcp.design import (Dataset, DataValidationError, DesignSet, SingularDesignError, build_orthonormal_design,
                          gram_deviation, map_coefficients, polynomial_design, polynomial_rows)
from oracles import orthonormal_poly

ARMS = np.arange(1, 7, dtype=float)


def test_order_zero_scalar_case():
    d = polynomial_design(0, ARMS)
    assert d.transform[0, 0] == pytest.approx(np.sqrt(6))
    np.testing.assert_allclose(d.designs[:, 0, 0], 1 / np.sqrt(6))


def test_already_orthonormal_rows_are_unchanged():
    d = build_orthonormal_design(np.eye(2))
    np.testing.assert_allclose(d.transform, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(d.designs[:, 0, :], np.eye(2), atol=1e-15)


@pytest.mark.parametrize("order", range(6))
def test_polynomial_design_orthonormal_and_matches_gram_schmidt(order):
    d = polynomial_design(order, ARMS)
    assert gram_deviation(d) <= 1e-10
    np.testing.assert_allclose(d.designs[:, 0, :], orthonormal_poly(order), atol=1e-10)
    raw = polynomial_rows(order, ARMS)
    np.testing.assert_allclose(d.transform.T @ d.transform, raw.T @ raw, rtol=1e-10)
    assert np.allclose(d.transform, np.triu(d.transform)) and np.all(np.diag(d.transform) > 0)


def test_true_coefficients_reproduce_quadratic_means():
    d = polynomial_design(2, ARMS)
    beta = map_coefficients([1.0, 1.0, 0.5], d.transform)
    np.testing.assert_allclose(d.designs[:, 0, :] @ beta, 1 + ARMS + 0.5 * ARMS**2, atol=1e-10)
    np.testing.assert_allclose(np.linalg.solve(d.transform, beta), [1.0, 1.0, 0.5], atol=1e-12)


def test_map_coefficients_trivial_cases():
    a = polynomial_design(2, ARMS).transform
    np.testing.assert_array_equal(map_coefficients(np.zeros(3), a), np.zeros(3))
    np.testing.assert_array_equal(map_coefficients([1.0, 2.0], np.eye(2)), [1.0, 2.0])
    with pytest.raises(ValueError):
        map_coefficients([1.0, 2.0], a)


def test_rank_deficient_rows_name_the_candidate():
    with pytest.raises(SingularDesignError) as info:
        build_orthonormal_design(polynomial_rows(3, [1.0, 1.0, 2.0, 2.0]), candidate_id="cubic")
    assert info.value.candidate_id == "cubic" and "cubic" in str(info.value)
    with pytest.raises(SingularDesignError):
        polynomial_design(5, np.arange(1, 5))


@given(arrays(float, (6, 3), elements=st.floats(-5, 5)))
def test_orthonormality_property(raw):
    assume(np.linalg.cond(raw) < 1e4)
    d = build_orthonormal_design(raw)
    assert gram_deviation(d) <= 1e-8
    b = np.array([0.3, -1.0, 2.0])
    # basis change keeps the fitted values
    np.testing.assert_allclose(d.designs[:, 0, :] @ map_coefficients(b, d.transform), raw @ b,
                               atol=1e-10 * max(1.0, np.abs(raw @ b).max()))


def test_dataset_validation():
    z, y = np.zeros((2, 1)), np.ones((2, 1))
    with pytest.raises(DataValidationError, match="sum to 1"):
        Dataset(np.array([[1, 1, 0], [0, 1, 0]]), z, y)
    with pytest.raises(DataValidationError, match="binary"):
        Dataset(np.array([[0.5, 0.5], [0, 1]]), z, y)
    with pytest.raises(DataValidationError, match="row counts"):
        Dataset(np.array([[1, 0]]), z, y)
    with pytest.raises(DataValidationError, match="finite"):
        Dataset(np.array([[1, 0], [0, 1]]), z, np.array([[1.0], [np.nan]]))
    # single arm is the missing-data layout: unobserved rows may carry NaN
    d = Dataset(np.array([[1], [0]]), z, np.array([[1.0], [np.nan]]))
    np.testing.assert_array_equal(d.arms, [0, -1])
    with pytest.raises(ValueError):
        d.outcomes[0, 0] = 2.0


def test_design_set_expand_shapes():
    d = polynomial_design(1, ARMS)
    assert d.shared and d.expand(4).shape == (4, 6, 1, 2)
    per = DesignSet("x", np.zeros((3, 2, 1, 2)))
    with pytest.raises(DataValidationError):
        per.expand(4)
    with pytest.raises(SingularDesignError):
        DesignSet("bad", np.zeros((2, 1, 2)), transform=np.zeros((2, 2)))
