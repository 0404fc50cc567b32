import itertools
from math import factorial

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tensortomo import _multiindex as mi
from tensortomo.errors import SymbolRegressionError, ValidationError
from tensortomo.symbols import (BlockLayout, CurvatureCoefficients, FinitePointSymbolParams, deltasF_symbol,
                                dsF_symbol, epsilon_family_check, fiber_infinity_certificate,
                                finite_point_certificate, gaussian_cutoff_transform, printed_DD, printed_rank3,
                                product_DD, projector_integrand, rank3_d_delta, rank3_delta_d,
                                symbol_regression, witten_factorization_check, witten_threshold)

xi_s = st.floats(-3, 3)
eta_s = st.lists(st.floats(-3, 3), min_size=2, max_size=2)
F_s = st.floats(0, 3)


def block_to_full(layout, vec):
    """Block vector -> full tensor on R^n with axis 0 the x direction."""
    n, m = layout.n, layout.m
    full = np.zeros((n,) * m, complex)
    for j in range(m + 1):
        for c, alpha in zip(vec[layout.block(j)], mi.canonical_indices(n - 1, j)):
            idx = (0,) * (m - j) + tuple(a + 1 for a in alpha)
            for p in set(itertools.permutations(idx)):
                full[p] = c
    return full


def full_to_block(layout, full):
    n, m = layout.n, layout.m
    return np.concatenate([[full[(0,) * (m - j) + tuple(a + 1 for a in alpha)]
                            for alpha in mi.canonical_indices(n - 1, j)] for j in range(m + 1)])


def dense_sym_product(zeta, f):
    T = np.multiply.outer(zeta, f)
    m = T.ndim
    return sum(np.transpose(T, p) for p in itertools.permutations(range(m))) / factorial(m)


@given(xi_s, eta_s, F_s)
def test_dsF_matches_dense_symmetrized_product(xi, eta, F):
    # flat symbol of d^s_F: f -> Sym(zeta x f), zeta = (xi + iF, eta)
    A = dsF_symbol(xi, eta, F).matrix
    L3, L4 = BlockLayout(3, 3), BlockLayout(3, 4)
    zeta = np.array([xi + 1j * F, *eta])
    for col in range(L3.dim):
        e = np.zeros(L3.dim)
        e[col] = 1.0
        oracle = full_to_block(L4, dense_sym_product(zeta, block_to_full(L3, e)))
        np.testing.assert_allclose(A[:, col], oracle, atol=1e-12)


def test_block_layout_sizes():
    assert BlockLayout(3, 4).dim == 15 and BlockLayout(4, 4).dim == 35
    assert BlockLayout(3, 3).sizes == [1, 2, 3, 4]
    np.testing.assert_array_equal(BlockLayout(3, 4).weights[:2], [1, 4])


def test_dd_diagonal_at_zero_eta():
    xi, F = 1.3, 0.7
    q = xi**2 + F**2
    P = product_DD(xi, [0.0, 0.0], F)
    for j, c in enumerate([1.0, 0.75, 0.5, 0.25, 0.0]):
        np.testing.assert_allclose(P.block(j, j), c * q * np.eye(j + 1), atol=1e-13)


def test_displayed_delta_is_the_adjoint(rng):
    curv = CurvatureCoefficients.random(2.0, 3, rng)
    for _ in range(20):
        xi, F = rng.uniform(-3, 3), rng.uniform(0, 3)
        eta = rng.uniform(-3, 3, 2)
        np.testing.assert_allclose(deltasF_symbol(xi, eta, F, curv, displayed=True).matrix,
                                   deltasF_symbol(xi, eta, F, curv).matrix, atol=1e-12)


def test_regression_and_the_corrected_entry(rng):
    curv = CurvatureCoefficients.random(1.0, 3, rng)
    assert symbol_regression(0.4, [1.1, -0.3], 0.9, curv)["max_error"] <= 1e-12
    xi, F = 2.0, 1.0
    P = product_DD(xi, [0.0, 0.0], F)
    printed = printed_DD(xi, [0.0, 0.0], F, as_printed=True)
    np.testing.assert_allclose(P.block(1, 1), 0.75 * (xi**2 + F**2) * np.eye(2))
    np.testing.assert_allclose(printed.block(1, 1), 0.25 * (xi**2 + F**2) * np.eye(2))
    with pytest.raises(SymbolRegressionError, match=r"\(2, 3\)"):
        symbol_regression(0.4, [1.1, -0.3], 0.9, curv, mutate=(2, 3))


def test_rank3_displays_match_products(rng):
    curv = CurvatureCoefficients.random(1.0, 3, rng)
    xi, eta, F = 0.8, np.array([0.5, -1.2]), 1.4
    np.testing.assert_allclose(printed_rank3("delta_d", xi, eta, F, curv).matrix,
                               rank3_delta_d(xi, eta, F, curv).matrix, atol=1e-12)
    np.testing.assert_allclose(printed_rank3("d_delta", xi, eta, F, curv).matrix,
                               rank3_d_delta(xi, eta, F, curv).matrix, atol=1e-12)
    assert not np.allclose(printed_rank3("d_delta", xi, eta, F, curv, as_printed=True).matrix,
                           rank3_d_delta(xi, eta, F, curv).matrix)
    with pytest.raises(ValidationError):
        printed_rank3("curl", xi, eta, F)


@given(xi_s, eta_s, F_s)
def test_witten_identity_flat(xi, eta, F):
    w = witten_factorization_check(xi, eta, F)
    assert w.residual <= 1e-12
    assert w.min_eig >= w.lower_bound - 1e-10


def test_witten_with_curvature(rng):
    curv = CurvatureCoefficients.random(0.5, 3, rng)
    w = witten_factorization_check(2.0, [1.0, -1.0], 3.0, curv)
    assert w.passed and w.remainder_norm > 0
    flat = witten_threshold(0.0, samples=20, F_grid=[0.0, 1.0])
    assert flat["threshold"] == 0.0
    curved = witten_threshold(2.0, samples=30, F_grid=np.linspace(0, 20, 11))
    assert curved["threshold"] is not None and np.all(curved["min_eig"][-1] > 0)


@pytest.mark.parametrize("xi,eta", [(1.0, [0.0, 0.0]), (0.0, [1.0, 0.0]), (0.0, [0.6, 0.8]), (0.3, [-1.0, 2.0])])
def test_fiber_infinity_examples(xi, eta):
    cert = fiber_infinity_certificate(xi, eta)
    assert cert and cert.min_sigma > 1e-3
    assert cert.rows >= cert.unknowns == 15


def test_fiber_infinity_rejects_zero_and_n4():
    with pytest.raises(ValidationError):
        fiber_infinity_certificate(0.0, [0.0, 0.0])
    cert = fiber_infinity_certificate(0.4, [0.5, -0.2, 0.7], n=4)
    assert cert and cert.unknowns == 35


@pytest.mark.parametrize("xi_F,eta_F", [(0.0, [0.0, 0.0]), (1.5, [2.0, 0.0]), (-3.0, [0.5, 0.5])])
def test_finite_point_examples(xi_F, eta_F):
    cert = finite_point_certificate(xi_F, eta_F, rank_check=np.any(eta_F))
    assert cert and cert.min_sigma > 1e-3
    if np.any(eta_F):
        assert all(cert.details["families"].values())


def test_finite_point_params():
    p = FinitePointSymbolParams(alpha=0.7, F=2.5)
    for xi in (-1.0, 0.0, 2.0):
        assert p.phi_from_definition(xi) == pytest.approx(p.phi(xi), abs=1e-12)
    assert all(epsilon_family_check(0.5, [1.0, 0.0]).values())


def test_projector_at_zero_S():
    Y = np.array([0.6, -0.8])
    P = projector_integrand(0.0, Y)
    L = BlockLayout(3, 4)
    outside = np.ones((15, 15), bool)
    outside[L.block(4), L.block(4)] = False
    assert np.all(P[outside] == 0)
    assert np.linalg.matrix_rank(P) == 1
    # M P is symmetric: P is self-adjoint for the M(4) pairing
    MP = L.weights[:, None] * P
    np.testing.assert_allclose(MP, MP.T, atol=1e-14)
    with pytest.raises(ValidationError):
        projector_integrand(0.0, [1.0, 1.0])


@pytest.mark.parametrize("nu", [1.0, 0.25])
def test_gaussian_cutoff_constant(nu):
    g = gaussian_cutoff_transform(nu)
    assert abs(g["c"] - np.sqrt(2 * np.pi)) <= 1e-10
    assert g["max_error"] <= 1e-10
    # the transform is real and even in sigma
    np.testing.assert_allclose(g["transform"], g["transform"][::-1], atol=1e-12)
