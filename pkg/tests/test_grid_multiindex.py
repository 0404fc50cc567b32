import itertools
from math import factorial

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tensortomo import _multiindex as mi
from tensortomo.errors import OutOfDomainError, ValidationError
from tensortomo.grid import Grid


@pytest.mark.parametrize("n,m,expected", [(3, 4, 15), (3, 3, 10), (4, 4, 35), (2, 4, 5), (3, 0, 1)])
def test_component_counts(n, m, expected):
    assert mi.n_components(n, m) == expected
    assert len(mi.canonical_indices(n, m)) == expected


@given(st.integers(2, 4), st.integers(0, 4))
def test_multiplicities_sum_to_full_size(n, m):
    assert mi.multiplicities(n, m).sum() == n**m


def test_multiplicities_by_enumeration():
    for a, mu in zip(mi.canonical_indices(3, 4), mi.multiplicities(3, 4)):
        assert mu == len(set(itertools.permutations(a)))


@given(st.integers(2, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_full_roundtrip(n, m, seed):
    c = np.random.default_rng(seed).standard_normal(mi.n_components(n, m))
    full = mi.to_full(c, n, m)
    for p in itertools.permutations(range(m)):
        np.testing.assert_array_equal(full, np.transpose(full, p))
    np.testing.assert_allclose(mi.from_full(full, n, m), c, atol=1e-14)


def test_contract_matches_dense_loop(rng):
    n, m = 3, 4
    c = rng.standard_normal(mi.n_components(n, m))
    v = rng.standard_normal(n)
    full = mi.to_full(c, n, m)
    dense = sum(full[t] * np.prod(v[list(t)]) for t in itertools.product(range(n), repeat=m))
    assert abs(mi.contract(c, v, m) - dense) < 1e-12


def test_symmetrize_full_averages_permutations(rng):
    T = rng.standard_normal((3, 3, 3))
    S = mi.symmetrize_full(T, 3)
    manual = sum(np.transpose(T, p) for p in itertools.permutations(range(3))) / factorial(3)
    np.testing.assert_allclose(S, manual, atol=1e-14)


def test_grid_basics():
    g = Grid((0, 0, 0), (1, 2, 3), (3, 5, 4))
    assert g.n_nodes == 60
    np.testing.assert_allclose(g.spacing, [0.5, 0.5, 1.0])
    assert abs(g.volume_weights.sum() - 6.0) < 1e-12
    assert g.edge_mask.sum() == 60 - 1 * 3 * 2
    assert g.refine().shape == (5, 9, 7)


def test_grid_validation():
    with pytest.raises(ValidationError):
        Grid((0, 0), (1, 1), (1, 3))
    with pytest.raises(ValidationError):
        Grid((0, 0), (0, 1), (3, 3))


def test_interpolation_exact_for_multilinear(rng):
    g = Grid((-1, -1, 0), (1, 2, 1), (5, 6, 4))
    f = lambda p: 1 + 2 * p[:, 0] - p[:, 1] + 3 * p[:, 0] * p[:, 1] * p[:, 2]  # noqa: E731
    pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 2, 50), rng.uniform(0, 1, 50)])
    np.testing.assert_allclose(g.interpolate(f(g.nodes), pts), f(pts), atol=1e-12)
    A = g.interpolation_matrix(pts)
    np.testing.assert_allclose(A @ f(g.nodes), f(pts), atol=1e-12)


def test_stencil_outside_raises():
    g = Grid.cube(4, 2)
    with pytest.raises(OutOfDomainError):
        g.stencil(np.array([[1.5, 0.0]]))


def test_diff_matrix_second_order():
    g = Grid((0,), (1,), (11,))
    x = g.nodes[:, 0]
    np.testing.assert_allclose(g.diff_matrix(0) @ x**2, 2 * x, atol=1e-12)
