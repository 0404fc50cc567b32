import warnings

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tensortomo.errors import ValidationError
from tensortomo.estimators import LocalInversionEstimator, RayTransformEstimator, SolenoidalProjector
from tensortomo.gauge import solenoidal_project
from tensortomo.geometry import BoundaryChart, ChartMetric, FanParams, local_geodesic_fan
from tensortomo.grid import Grid
from tensortomo.tensors import BumpTensorField, SymmetricTensorField
from tensortomo.transform import constant_field, forward_fan

LENS = BoundaryChart.lens(3, 1.0, 0.5, 0.25)
FLAT = ChartMetric.euclidean()


@pytest.fixture(scope="module")
def setup():
    ys = np.stack(np.meshgrid(*(2 * [np.linspace(-0.4, 0.4, 5)])), -1).reshape(-1, 2)
    fan = local_geodesic_fan(LENS, FanParams(np.linspace(0, 0.4, 4), ys, n_lambda=3, n_omega=6))
    grid = Grid((-0.9, -0.9, 0.3), (0.9, 0.9, 1.0), (8, 8, 8))
    return fan, grid


def test_params_and_clone(setup):
    fan, grid = setup
    est = LocalInversionEstimator(FLAT, LENS, fan, grid, F=2.0, reg=1e-2)
    params = est.get_params()
    assert params["F"] == 2.0 and params["reg"] == 1e-2
    copy = clone(est).set_params(maxiter=5)
    assert copy.maxiter == 5 and est.maxiter == 400
    assert "rtol" in SolenoidalProjector().get_params()


def test_not_fitted_errors(setup):
    fan, grid = setup
    with pytest.raises(NotFittedError):
        RayTransformEstimator(FLAT, LENS, fan, grid).transform(constant_field(np.zeros(15), 4, 3))
    with pytest.raises(NotFittedError):
        LocalInversionEstimator(FLAT, LENS, fan, grid).predict()
    with pytest.raises(ValidationError):
        RayTransformEstimator().fit()


def test_ray_transform_estimator_matches_forward_fan(setup, rng):
    fan, grid = setup
    f = BumpTensorField([[0.0, 0.0, 0.7]], [0.25], rng.standard_normal(15), 4, power=3)
    est = RayTransformEstimator(FLAT, LENS, fan, grid, step=1e-2).fit()
    assert est.n_rays_ > 0
    direct = forward_fan(f, fan, FLAT, LENS, trace=est.trace_)
    np.testing.assert_array_equal(est.transform(f).values, direct.values)
    both = est.transform([f, f])
    assert len(both) == 2


def test_inversion_fit_predict_score(setup, rng):
    fan, grid = setup
    f = BumpTensorField([[0.0, 0.0, 0.7]], [0.25], rng.standard_normal(15), 4, power=3)
    fwd = RayTransformEstimator(FLAT, LENS, fan, grid).fit()
    data = fwd.transform(f)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = LocalInversionEstimator(FLAT, LENS, fan, grid, reg=1e-3, maxiter=50).fit(data, trace=fwd.trace_)
    assert est.solution_.rank == 4
    assert est.diagnostics_["iterations"] <= 50
    pred = est.predict()
    assert len(pred) == len(data)
    assert est.score(data) > 0.5
    zero = LocalInversionEstimator(FLAT, LENS, fan, grid, maxiter=5).fit(fwd.transform(
        constant_field(np.zeros(15), 4, 3)), trace=fwd.trace_)
    assert np.all(zero.solution_.comps == 0)


def test_solenoidal_projector_matches_function(rng):
    grid = Grid((-1, -1, 0.3), (1, 1, 1), (6, 6, 6))
    f = SymmetricTensorField(grid, 4, rng.standard_normal((grid.n_nodes, 15)))
    x = grid.nodes[:, 2]
    proj = SolenoidalProjector(F=2.0, x=x)
    u = proj.fit(f).transform(f)
    ref = solenoidal_project(f, 2.0, x, x > 0)
    np.testing.assert_allclose(u.comps, ref.u.comps, atol=1e-12)
    assert proj.decomposition_.residual_gauge <= 1e-8 * proj.decomposition_.f_norm
    by_callable = SolenoidalProjector(F=2.0, x=lambda p: p[:, 2]).fit_transform(f)
    np.testing.assert_allclose(by_callable.comps, u.comps, atol=1e-12)
    with pytest.raises(ValidationError):
        SolenoidalProjector().fit(f)
