import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from tensortomo.errors import (DegenerateMetricError, EmptyLevelError, InvalidProfileError, NoExitError,
                               ValidationError)
from tensortomo.geometry import (BoundaryChart, ChartMetric, FanParams, RadialProfile, convexity_probe,
                                 herglotz_check, integrate_geodesic, local_geodesic_fan, read_metric_file,
                                 trace_chords, write_metric_file)
from tensortomo.grid import Grid

LINEAR = RadialProfile.linear(2.0, 1.0)


def sphere_chart(R=1.0):
    """x~ = -|p|: level sets are spheres."""
    return BoundaryChart(3, lambda p: R - np.linalg.norm(p, axis=1), lambda p: -np.linalg.norm(p, axis=1), 0.5,
                         grad_xtilde=lambda p: -p / np.linalg.norm(p, axis=1, keepdims=True))


def plane_chart():
    return BoundaryChart(3, lambda p: 1 - np.linalg.norm(p, axis=1), lambda p: p[:, 0].copy(), 0.5,
                         grad_xtilde=lambda p: np.tile([1.0, 0, 0], (len(p), 1)))


def test_christoffel_flat_cases(rng):
    p = rng.uniform(-0.5, 0.5, (10, 3))
    assert np.all(ChartMetric.euclidean().christoffel(p) == 0)
    assert np.allclose(ChartMetric.conformal_radial(RadialProfile.constant(1.0)).christoffel(p), 0)


def test_christoffel_conformal_against_finite_difference():
    m = ChartMetric.conformal_radial(LINEAR)
    p = np.array([[0.5, 0.0, 0.0]])
    phi = lambda q: -np.log(LINEAR(np.linalg.norm(q, axis=1)))  # noqa: E731
    h = 1e-6
    dphi = np.array([(phi(p + h * e) - phi(p - h * e))[0] / (2 * h) for e in np.eye(3)])
    d = np.eye(3)
    oracle = (np.einsum("ki,j->kij", d, dphi) + np.einsum("kj,i->kij", d, dphi)
              - np.einsum("ij,k->kij", d, dphi))
    np.testing.assert_allclose(m.christoffel(p)[0], oracle, atol=1e-8)


def test_christoffel_generic_formula_matches_conformal(rng):
    m = ChartMetric.conformal_radial(LINEAR)
    generic = ChartMetric(3, m.g, m.dg, "custom")
    p = rng.uniform(-0.6, 0.6, (20, 3))
    np.testing.assert_allclose(generic.christoffel(p), m.christoffel(p), atol=1e-12)


def test_degenerate_metric_raises():
    bad = ChartMetric(3, lambda p: np.zeros((len(p), 3, 3)), lambda p: np.zeros((len(p), 3, 3, 3)))
    with pytest.raises(DegenerateMetricError):
        bad.christoffel(np.zeros((1, 3)))


def test_flat_chord_length():
    ball = BoundaryChart.ball(3, 1.0)
    p0 = np.array([[0.0, 0.3, 0.0]])
    path = integrate_geodesic(ChartMetric.euclidean(), ball, p0, np.array([[1.0, 0, 0]]), step=1e-2)
    assert path.exited
    assert abs(path.length - np.sqrt(1 - 0.09)) < 1e-6
    full = trace_chords(ChartMetric.euclidean(), ball, p0, np.array([[1.0, 0, 0]]), step=1e-2)
    assert abs(full.lengths[0] - 2 * np.sqrt(1 - 0.09)) < 1e-6


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0, 2 * np.pi))
def test_flat_geodesics_are_lines(a, b, th):
    p0 = np.array([[a, b, 0.1]])
    v0 = np.array([[np.cos(th), np.sin(th), 0.0]])
    path = integrate_geodesic(ChartMetric.euclidean(), BoundaryChart.ball(3), p0, v0, step=1e-2)
    k = len(path) // 2
    np.testing.assert_allclose(path.points[k], p0[0] + path.t[k] * v0[0], atol=1e-10)


@pytest.mark.parametrize("angle", [np.pi / 2, 1.2, 0.9])
def test_turning_point_matches_snell(angle):
    m = ChartMetric.conformal_radial(LINEAR)
    r0 = 0.8
    c0 = LINEAR(r0)
    p0 = np.array([[r0, 0.0, 0.0]])
    # angle measured from the radial direction; pi/2 is tangential
    v0 = c0 * np.array([[-np.cos(angle), np.sin(angle), 0.0]])
    path = integrate_geodesic(m, BoundaryChart.ball(3), p0, v0, step=1e-3)
    invariant = r0 * np.sin(angle) / c0
    r_turn = brentq(lambda r: r / LINEAR(r) - invariant, 1e-9, r0)
    assert abs(np.linalg.norm(path.points, axis=1).min() - r_turn) < 1e-5


def test_geodesic_validation():
    m = ChartMetric.euclidean()
    with pytest.raises(ValidationError):
        integrate_geodesic(m, BoundaryChart.ball(3), np.zeros((1, 3)), np.array([[2.0, 0, 0]]))
    with pytest.raises(NoExitError):
        integrate_geodesic(m, BoundaryChart.ball(3), np.zeros((1, 3)), np.array([[1.0, 0, 0]]), step=1e-2,
                           tmax=0.5, require_exit=True)


def test_herglotz_examples():
    r = herglotz_check(RadialProfile.constant(1.0))
    assert r.passed and abs(r.margin - 1.0) < 1e-9
    # d/dr r/(2-r) = 2/(2-r)^2 > 0
    assert herglotz_check(LINEAR).passed
    # d/dr r e^{-2r} = e^{-2r}(1-2r) < 0 for r > 1/2
    r = herglotz_check(RadialProfile.exponential(1.0, 2.0))
    assert not r.passed and r.margin < 0
    with pytest.raises(InvalidProfileError):
        herglotz_check(RadialProfile.linear(1.0, 2.0))


def test_herglotz_table_profile():
    # PREM-like: speed decreasing outward in steps, smoothed by PCHIP
    radii = [0.0, 0.2, 0.55, 0.9, 1.0]
    speeds = [2.2, 2.1, 1.8, 1.4, 1.2]
    assert herglotz_check(RadialProfile.table(radii, speeds)).passed
    with pytest.raises(InvalidProfileError):
        RadialProfile.table([0, 1], [1, -1])


def test_convexity_probe_examples():
    e = ChartMetric.euclidean()
    assert convexity_probe(e, sphere_chart(), -0.5).passed
    flat = convexity_probe(e, plane_chart(), 0.2)
    assert not flat.passed and abs(flat.worst) < 1e-6
    assert convexity_probe(ChartMetric.conformal_radial(LINEAR), sphere_chart(), -0.6).passed
    with pytest.raises(EmptyLevelError):
        convexity_probe(e, sphere_chart(), -3.0)


def test_lens_levels_convex_with_inward_sign():
    m = ChartMetric.conformal_radial(LINEAR)
    lens = BoundaryChart.lens(3, 1.0, 0.5, 0.25)
    assert convexity_probe(m, lens, -0.5, sign=-1.0).passed


def test_lens_coordinates_roundtrip(rng):
    lens = BoundaryChart.lens(3, 1.0, 0.5, 0.25)
    x = rng.uniform(0, 0.5, 20)
    y = rng.uniform(-0.5, 0.5, (20, 2))
    p = lens.from_xy(x, y)
    x2, y2 = lens.to_xy(p)
    np.testing.assert_allclose(x2, x, atol=1e-14)
    np.testing.assert_allclose(y2, y, atol=1e-14)
    J = lens.jac_xy(x, y)
    h = 1e-6
    fd = (lens.from_xy(x + h, y) - lens.from_xy(x - h, y)) / (2 * h)
    np.testing.assert_allclose(J[:, :, 0], fd, atol=1e-8)


def test_fan_examples():
    lens = BoundaryChart.lens(3, 1.0, 0.5, 0.25)
    fan = local_geodesic_fan(lens, FanParams([0.0, 0.1], np.zeros((1, 2)), n_lambda=5, n_omega=7, C2=1.0))
    at0 = fan.x == 0
    assert np.all(fan.lam[at0] == 0)
    lam = np.unique(fan.lam[fan.x == 0.1])
    np.testing.assert_allclose([lam.min(), lam.max()], [-0.1, 0.1])
    assert np.max(np.abs(np.linalg.norm(fan.omega, axis=1) - 1)) < 1e-14


def test_fan_velocity_unit_speed():
    m = ChartMetric.conformal_radial(LINEAR)
    lens = BoundaryChart.lens(3, 1.0, 0.5, 0.25)
    fan = local_geodesic_fan(lens, FanParams([0.1, 0.3], np.array([[0.0, 0.1]]), 3, 5))
    v = fan.velocities(m, lens)
    np.testing.assert_allclose(m.norm(fan.points, v), 1.0, atol=1e-12)


def test_metric_file_roundtrip(tmp_path):
    g = Grid.cube(9, 3, 0.9)
    m = ChartMetric.conformal_radial(LINEAR)
    samples = m.g(g.nodes).reshape(g.shape + (3, 3))
    write_metric_file(tmp_path / "m.bin", g, samples)
    g2, s2 = read_metric_file(tmp_path / "m.bin")
    assert g2 == g
    np.testing.assert_array_equal(s2, samples)
    gm = ChartMetric.from_grid(g2, s2)
    p = np.array([[0.2, -0.1, 0.3]])
    np.testing.assert_allclose(gm.g(p), m.g(p), rtol=5e-3)
    np.testing.assert_allclose(gm.christoffel(p), m.christoffel(p), atol=5e-2)
