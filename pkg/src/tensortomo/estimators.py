"""scikit-learn style wrappers around the forward transform, inversion and gauge projector."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import ValidationError
from .gauge import active_mask, invert_local, solenoidal_project
from .tensors import SymmetricTensorField
from .transform import forward_fan, trace_fan


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class RayTransformEstimator(TransformerMixin, BaseEstimator):
    """Geodesic ray transform over a fixed fan.

    ``fit`` traces the chords once; ``transform`` maps a field (or a list of
    fields) to :class:`RayData`.  Tracing is independent of the field, so the
    traced fan is reused for every call.
    """

    def __init__(self, metric=None, boundary=None, fan=None, grid=None, step: float = 1e-2,
                 tmax: float = 10.0):
        self.metric = metric
        self.boundary = boundary
        self.fan = fan
        self.grid = grid
        self.step = step
        self.tmax = tmax

    def fit(self, X=None, y=None):
        if self.metric is None or self.boundary is None or self.fan is None:
            raise ValidationError("metric, boundary and fan are required")
        self.trace_ = trace_fan(self.fan, self.metric, self.boundary, self.step, self.tmax, self.grid)
        self.n_rays_ = int(np.sum(self.trace_.status == 0))
        return self

    def transform(self, X):
        _check_fitted(self, "trace_")
        if isinstance(X, (list, tuple)):
            return [self._one(f) for f in X]
        return self._one(X)

    def _one(self, f):
        return forward_fan(f, self.fan, self.metric, self.boundary, trace=self.trace_)


class LocalInversionEstimator(BaseEstimator):
    """Gauge-penalized local inversion of rank-4 ray data.

    ``fit(data)`` solves for the solenoidal representative (``solution_``) and
    keeps the diagnostics.  ``predict()`` returns the ray transform of the
    solution on the fitted fan, and ``score(data)`` is one minus the relative
    data misfit on the rays used.
    """

    def __init__(self, metric=None, boundary=None, fan=None, grid=None, F: float = 1.0,
                 reg: float = 1e-3, x_min: float = 0.1, step: float = 1e-2, tmax: float = 10.0,
                 maxiter: int = 400, rtol: float = 1e-8, weight_data: bool = False, project: bool = True):
        self.metric = metric
        self.boundary = boundary
        self.fan = fan
        self.grid = grid
        self.F = F
        self.reg = reg
        self.x_min = x_min
        self.step = step
        self.tmax = tmax
        self.maxiter = maxiter
        self.rtol = rtol
        self.weight_data = weight_data
        self.project = project

    def fit(self, X, y=None, trace=None):
        if self.grid is None or self.fan is None:
            raise ValidationError("grid and fan are required")
        self.trace_ = trace if trace is not None else trace_fan(self.fan, self.metric, self.boundary,
                                                               self.step, self.tmax, self.grid)
        res = invert_local(X, self.fan, self.metric, self.boundary, self.grid, self.F, reg=self.reg,
                           x_min=self.x_min, trace=self.trace_, maxiter=self.maxiter, rtol=self.rtol,
                           weight_data=self.weight_data, project=self.project)
        self.solution_ = res.u
        self.raw_solution_ = res.f
        self.diagnostics_ = res.diagnostics
        return self

    def predict(self, X=None):
        """Ray data of the recovered field on the fitted fan (``X`` is ignored)."""
        _check_fitted(self, "solution_")
        return forward_fan(self.solution_, self.fan, self.metric, self.boundary, trace=self.trace_)

    def score(self, X, y=None):
        pred = self.predict().values
        obs = np.asarray(X.values if hasattr(X, "values") else X, float)
        ok = (self.trace_.status == 0) & np.isfinite(obs) & np.isfinite(pred)
        den = np.linalg.norm(obs[ok])
        if den == 0:
            return 1.0 if np.linalg.norm(pred[ok]) == 0 else -np.inf
        return float(1.0 - np.linalg.norm(pred[ok] - obs[ok]) / den)


class SolenoidalProjector(TransformerMixin, BaseEstimator):
    """Weighted solenoidal projection f -> u with f = u + d^s v, v = 0 off the mask.

    ``x`` is the boundary-distance function at the grid nodes (or a callable of
    the nodes); ``mask`` defaults to all nodes with x > 0.  ``fit`` records the
    potential of the last transformed field in ``potential_``.
    """

    def __init__(self, F: float = 1.0, x=None, mask=None, metric=None, rtol: float = 1e-10,
                 x_min: float = 0.0, boundary=None):
        self.F = F
        self.x = x
        self.mask = mask
        self.metric = metric
        self.rtol = rtol
        self.x_min = x_min
        self.boundary = boundary

    def _setup(self, f: SymmetricTensorField):
        if self.x is not None:
            x = self.x(f.grid.nodes) if callable(self.x) else np.asarray(self.x, float)
        elif self.boundary is not None:
            x = self.boundary.x(f.grid.nodes)
        else:
            raise ValidationError("either x or boundary is required")
        if self.mask is not None:
            mask = np.asarray(self.mask, bool)
        elif self.boundary is not None:
            mask = active_mask(f.grid, self.boundary, self.x_min)
        else:
            mask = x > self.x_min
        return x, mask

    def fit(self, X, y=None):
        self.decomposition_ = self._decompose(X)
        return self

    def _decompose(self, f):
        x, mask = self._setup(f)
        return solenoidal_project(f, self.F, x, mask, self.metric, self.rtol)

    def transform(self, X):
        dec = self._decompose(X)
        self.decomposition_ = dec
        return dec.u
