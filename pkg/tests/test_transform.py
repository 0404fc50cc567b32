import numpy as np
import pytest

from tensortomo import _multiindex as mi
from tensortomo.errors import CoverageError, CoverageWarning, NoExitError, ValidationError
from tensortomo.geometry import (BoundaryChart, ChartMetric, FanParams, RadialProfile, integrate_geodesic,
                                 local_geodesic_fan, trace_chords)
from tensortomo.grid import Grid
from tensortomo.tensors import (AnalyticTensorField, BumpTensorField, SymmetricTensorField, isotropic_stiffness,
                                random_stiffness, stiffness_to_symmetric, sym_diff, symmetrize)
from tensortomo.transform import (OK, CutoffProfile, RayData, bundle_integrals, constant_field, forward_fan,
                                  forward_matrix, forward_single, qp_as_field, qp_perturbation, trace_fan,
                                  weighted_transform_L)

LINEAR = RadialProfile.linear(2.0, 1.0)
LENS = BoundaryChart.lens(3, 1.0, 0.5, 0.25)


class MetricSquared(AnalyticTensorField):
    """Sym(g x g): its rank-4 transform is the geodesic length."""

    rank, dim = 4, 3

    def __init__(self, metric):
        self.metric = metric

    def evaluate(self, points):
        g = self.metric.g(np.atleast_2d(points))
        return symmetrize(np.einsum("pij,pkl->pijkl", g, g), 4)


def small_fan(n_y=3):
    ys = np.stack(np.meshgrid(np.linspace(-0.2, 0.2, n_y), np.linspace(-0.2, 0.2, n_y)), -1).reshape(-1, 2)
    return local_geodesic_fan(LENS, FanParams([0.0, 0.1, 0.2], ys, n_lambda=3, n_omega=6))


def test_forward_single_examples():
    m = ChartMetric.conformal_radial(LINEAR)
    p0 = np.array([[0.1, 0.2, 0.0]])
    v0 = np.array([[0.6, 0.0, 0.8]])
    path = integrate_geodesic(m, BoundaryChart.ball(3), p0, v0 / m.norm(p0, v0)[:, None], step=1e-3)
    assert forward_single(constant_field(np.zeros(15), 4, 3), path) == 0.0
    assert forward_single(MetricSquared(m), path) == pytest.approx(path.length, rel=1e-10)


def test_forward_single_requires_exit():
    path = integrate_geodesic(ChartMetric.euclidean(), BoundaryChart.ball(3), np.zeros((1, 3)),
                              np.array([[1.0, 0, 0]]), step=1e-2, tmax=0.3)
    f = constant_field(np.ones(15), 4, 3)
    with pytest.raises(NoExitError):
        forward_single(f, path)
    assert forward_single(f, path, allow_partial=True) == pytest.approx(0.3)


def test_potential_fields_are_invisible(rng):
    m = ChartMetric.conformal_radial(LINEAR)
    v = BumpTensorField.random(rng, 3, power=3, support_radius=0.8)
    ds = sym_diff(v, m)
    p0 = rng.uniform(-0.3, 0.3, (40, 3))
    d = rng.standard_normal((40, 3))
    d /= m.norm(p0, d)[:, None]
    bundle = trace_chords(m, BoundaryChart.ball(3), p0, d, step=1e-3)
    vals = bundle_integrals(ds, bundle)
    scale = bundle_integrals(BumpTensorField(v.centers, v.radii, np.abs(ds.evaluate(v.centers)).max() *
                                             np.ones((len(v.radii), 15)), 4, 3), bundle)
    assert np.max(np.abs(vals)) <= 1e-6 * max(1.0, np.max(np.abs(scale)))


def test_forward_fan_zero_field_and_statuses():
    m = ChartMetric.conformal_radial(LINEAR)
    fan = small_fan()
    data = forward_fan(constant_field(np.zeros(15), 4, 3), fan, m, LENS, step=1e-2)
    ok = data.status == OK
    assert ok.any()
    assert np.all(data.values[ok] == 0)
    assert np.all(np.isnan(data.values[~np.isin(data.status, (0, 5))]))
    assert np.all(data.lam[data.x == 0] == 0)


def test_forward_fan_step_convergence(rng):
    m = ChartMetric.conformal_radial(LINEAR)
    fan = small_fan(2)
    # one bump inside the lens, where the fan lives
    f = BumpTensorField([[0.0, 0.0, 0.6]], [0.3], rng.standard_normal(15), 4, power=3)
    vals = [forward_fan(f, fan, m, LENS, step=h).values for h in (4e-3, 2e-3, 1e-3)]
    ok = np.isfinite(vals[0])
    e1 = np.max(np.abs(vals[0][ok] - vals[2][ok]))
    e2 = np.max(np.abs(vals[1][ok] - vals[2][ok]))
    assert e2 < e1 / 3


def test_qp_matches_symmetric_field(rng):
    m = ChartMetric.conformal_radial(LINEAR)
    a = random_stiffness(rng)
    path = integrate_geodesic(m, BoundaryChart.ball(3), np.array([[0.0, 0.3, 0.1]]),
                              np.array([[1.0, 0.0, 0.0]]) / m.norm(np.array([[0.0, 0.3, 0.1]]),
                                                                    np.array([[1.0, 0, 0]])), step=1e-2)
    q = qp_perturbation(a, 1.7, 1.2, path)
    assert q == pytest.approx(forward_single(qp_as_field(a, 1.7, 1.2), path), rel=1e-10, abs=1e-12)


def test_qp_isotropic_straight_chord():
    lam, mu, rho, cP = 1.5, 0.7, 2.0, 1.3
    path = integrate_geodesic(ChartMetric.euclidean(), BoundaryChart.ball(3), np.array([[-0.5, 0.2, 0.0]]),
                              np.array([[1.0, 0.0, 0.0]]), step=1e-2)
    expected = (lam + 2 * mu) / (rho * cP**6) * path.length
    assert qp_perturbation(isotropic_stiffness(lam, mu), rho, cP, path) == pytest.approx(expected, rel=1e-12)
    assert np.allclose(stiffness_to_symmetric(np.zeros((3,) * 4), rho, cP), 0)


def node_data(grid, node_ids, x, lam, omega, values):
    pts = grid.nodes[node_ids]
    R = len(node_ids)
    return RayData(np.full(R, x), np.zeros((R, 2)), lam, omega, values, np.ones(R), np.ones(R, bool),
                   points=pts, velocities=np.tile([1.0, 0, 0], (R, 1)))


def test_backprojection_single_entry():
    grid = Grid.cube(3, 3)
    d = node_data(grid, [13], 0.5, [0.0], [[1.0, 0.0]], [1.0])
    out = weighted_transform_L(d, None, grid)
    # xi = (omega, lam/x) = e_0; one lambda, one direction of the round circle of length 2 pi
    assert out.comps[13, 0] == pytest.approx(2 * np.pi)
    assert np.count_nonzero(out.comps) == 1
    zero = weighted_transform_L(node_data(grid, [13], 0.5, [0.0], [[1.0, 0.0]], [0.0]), None, grid)
    assert np.all(zero.comps == 0)


def test_backprojection_parity():
    # odd data in lambda cancel in every component with an even number of x factors
    grid = Grid.cube(3, 3)
    # one direction, so the omega sum cannot cancel anything itself
    lams = np.linspace(-0.5, 0.5, 5)
    d = node_data(grid, [13] * 5, 0.5, lams, np.tile([1.0, 0.0], (5, 1)), lams**3)
    out = weighted_transform_L(d, CutoffProfile.gaussian(0.05), grid).comps[13]
    n_x = np.array([idx.count(2) for idx in mi.canonical_indices(3, 4)])
    assert np.max(np.abs(out[n_x % 2 == 0])) < 1e-14
    assert np.max(np.abs(out[n_x % 2 == 1])) > 1e-3


def test_backprojection_coverage_diagnostics():
    grid = Grid.cube(3, 3)
    d = node_data(grid, [13], 0.5, [0.5], [[1.0, 0.0]], [1.0])
    with pytest.warns(CoverageWarning):
        out = weighted_transform_L(d, CutoffProfile.compact_bump(0.5), grid)
    assert np.all(out.comps == 0)
    with pytest.raises(CoverageError) as err:
        weighted_transform_L(d, None, grid, required=[0, 13])
    assert err.value.starved == [0]
    off = node_data(grid, [13], 0.5, [0.0], [[1.0, 0.0]], [1.0])
    off.points = off.points + 0.1
    with pytest.raises(ValidationError):
        weighted_transform_L(off, None, grid)


def test_forward_matrix_matches_forward_fan(rng):
    grid = Grid.cube(9, 3)
    m = ChartMetric.conformal_radial(LINEAR)
    fan = small_fan(2)
    tr = trace_fan(fan, m, LENS, 1e-2, grid=grid)
    f = SymmetricTensorField(grid, 4, rng.standard_normal((grid.n_nodes, 15)))
    A = forward_matrix(grid, 4, tr.bundle)
    data = forward_fan(f, fan, m, LENS, trace=tr)
    ok = np.isin(tr.status[tr.index], (0, 5))
    np.testing.assert_allclose((A @ f.flat)[ok], data.values[tr.index[ok]], rtol=1e-12, atol=1e-12)


def test_forward_matrix_flat_lengths_and_empty():
    grid = Grid.cube(5, 3)
    e = ChartMetric.euclidean()
    p0 = np.array([[0.0, 0.1, 0.2], [0.3, -0.2, 0.0]])
    v0 = np.array([[1.0, 0, 0], [0, 0.6, 0.8]])
    bundle = trace_chords(e, BoundaryChart.ball(3), p0, v0, step=1e-2)
    d = np.eye(3)
    gg = SymmetricTensorField(grid, 4, np.tile(symmetrize(np.einsum("ij,kl->ijkl", d, d)), (grid.n_nodes, 1)))
    np.testing.assert_allclose(forward_matrix(grid, 4, bundle) @ gg.flat, bundle.lengths, rtol=1e-12)
    empty_fan = local_geodesic_fan(LENS, FanParams([-0.1], np.zeros((1, 2)), 3, 4))
    tr = trace_fan(empty_fan, e, LENS)
    assert forward_matrix(grid, 4, tr.bundle).shape == (0, grid.n_nodes * 15)


def test_ray_data_roundtrip(tmp_path):
    m = ChartMetric.conformal_radial(LINEAR)
    data = forward_fan(constant_field(np.arange(15.0), 4, 3), small_fan(2), m, LENS)
    data.to_csv(tmp_path / "d.csv")
    data.write_binary(tmp_path / "d.bin")
    for back in (RayData.from_csv(tmp_path / "d.csv"), RayData.read_binary(tmp_path / "d.bin")):
        np.testing.assert_array_equal(back.values, data.values)
        np.testing.assert_array_equal(back.omega, data.omega)
        np.testing.assert_array_equal(back.status, data.status)
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX")
    with pytest.raises(ValidationError):
        RayData.read_binary(tmp_path / "bad.bin")
