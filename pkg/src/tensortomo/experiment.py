"""Builders and end-to-end pipelines driven by an experiment config dict."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from . import _multiindex as mi
from .errors import ValidationError
from .gauge import active_mask, gauge_representative, invert_local, relative_error
from .geometry import (BoundaryChart, ChartMetric, FanParams, RadialProfile, local_geodesic_fan)
from .grid import Grid
from .tensors import (AnalyticTensorField, BumpTensorField, SymDiffField, SymmetricTensorField,
                      random_stiffness, stiffness_to_symmetric, symmetrize_full)
from .transform import forward_fan, trace_fan


def build_profile(cfg) -> RadialProfile:
    return RadialProfile.from_config(cfg["metric"]["profile"])


def build_metric(cfg) -> ChartMetric:
    if cfg["metric"]["kind"] == "euclidean":
        return ChartMetric.euclidean(3)
    return ChartMetric.conformal_radial(build_profile(cfg), 3)


def build_lens(cfg) -> BoundaryChart:
    L = cfg["lens"]
    return BoundaryChart.lens(3, L["radius"], L["c"], L["kappa"])


def lens_box(radius: float, c: float, kappa: float):
    """Bounding box of {x~ >= -c} inside the ball: (lower, upper)."""
    R = radius
    g = lambda s: s**2 + (R - c - kappa * s**2) ** 2 - R**2  # noqa: E731
    s = brentq(g, 0.0, R) if g(R) > 0 else R
    zlo = max(-R, R - c - kappa * s**2)
    return (-s, -s, zlo), (s, s, R)


def build_grid(cfg) -> Grid:
    """Box around the deepest lens of the inversion schedule."""
    L = cfg["lens"]
    depth = L["c"] - min(0.0, min(cfg["inversion"]["taus"]))
    lo, hi = lens_box(L["radius"], depth, L["kappa"])
    return Grid(lo, hi, tuple(cfg["grid"]["shape"]))


def build_fan(cfg, lens: BoundaryChart):
    fc = cfg["fan"]
    ys = np.linspace(-fc["y_extent"], fc["y_extent"], fc["n_y"])
    Y = np.array([(a, b) for a in ys for b in ys])
    params = FanParams(np.linspace(fc["x_min"], fc["x_max"], fc["n_x"]), Y, fc["n_lambda"], fc["n_omega"],
                       fc["C2"])
    return local_geodesic_fan(lens, params)


class MetricSquareField(AnalyticTensorField):
    """Sym(g (x) g): its ray transform over unit-speed geodesics is the length."""

    def __init__(self, metric: ChartMetric):
        self.metric = metric
        self.dim = metric.dim
        self.rank = 4

    def evaluate(self, points):
        g = self.metric.g(points)
        return mi.from_full(symmetrize_full(np.einsum("pij,pkl->pijkl", g, g), 4), self.dim, 4)


class QPField(AnalyticTensorField):
    """Sym(a(p) / (rho c(|p|)^6)) for a stiffness perturbation a(p) = phi(p) a0."""

    def __init__(self, a0, profile: RadialProfile, rho: float, bump: AnalyticTensorField):
        self.a0 = np.asarray(a0, float)
        self.profile = profile
        self.rho = float(rho)
        self.bump = bump
        self.dim = 3
        self.rank = 4
        self._b0 = stiffness_to_symmetric(self.a0, 1.0, 1.0)

    def evaluate(self, points):
        p = np.asarray(points, float).reshape(-1, 3)
        phi = self.bump.evaluate(p)[:, 0]
        cP = self.profile(np.linalg.norm(p, axis=1))
        return (phi / (self.rho * cP**6))[:, None] * self._b0[None, :]


class LensWindow(AnalyticTensorField):
    """Scalar window psi(x) exp(-|y|^2 / (2 w^2)) in lens coordinates.

    psi is a cubic power of a parabola on (x_lo, x_hi), C^2 at both ends, so the
    window vanishes for x <= x_lo.
    """

    def __init__(self, lens: BoundaryChart, x_lo: float, x_hi: float, width: float):
        self.lens = lens
        self.x_lo, self.x_hi, self.width = float(x_lo), float(x_hi), float(width)
        self.dim = lens.dim
        self.rank = 0

    def evaluate(self, points):
        p = np.asarray(points, float).reshape(-1, self.dim)
        x, y = self.lens.to_xy(p)
        t = 4 * (x - self.x_lo) * (self.x_hi - x) / (self.x_hi - self.x_lo) ** 2
        psi = np.where(t > 0, np.clip(t, 0, None) ** 3, 0.0)
        return (psi * np.exp(-np.sum(y**2, axis=1) / (2 * self.width**2)))[:, None]


def lens_bumps(rng, lens: BoundaryChart, rank: int, n_bumps: int, radius: float,
               x_range=(0.2, 0.35), y_extent: float = 0.4, power: float = 3.0) -> BumpTensorField:
    """Random bumps centred at lens depth x in ``x_range``."""
    ys = rng.uniform(-y_extent, y_extent, (n_bumps, 2))
    xs = rng.uniform(*x_range, n_bumps)
    centers = lens.from_xy(xs, ys)
    coeffs = rng.standard_normal((n_bumps, mi.n_components(3, rank)))
    return BumpTensorField(centers, np.full(n_bumps, radius), coeffs, rank, power)


def interior_radius(lens: BoundaryChart, center, radius: float, margin: float = 0.02) -> float:
    """Largest r <= radius with the ball B(center, r) inside {x > margin} and the outer sphere."""
    dirs = np.random.default_rng(0).standard_normal((400, len(center)))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = float(radius)
    for _ in range(60):
        pts = center + r * dirs
        if np.all(lens.x(pts) > margin) and np.all(lens.rho(pts) > margin):
            return r
        r *= 0.9
    raise ValidationError("bump centre too close to the lens boundary")


def interior_bumps(rng, lens: BoundaryChart, rank: int, n_bumps: int, radius: float,
                   min_radius: float = 0.12, tries: int = 200, margin: float = 0.02) -> BumpTensorField:
    """Bumps supported strictly inside the lens, so they vanish on its boundary."""
    centers, radii = [], []
    for _ in range(tries):
        b = lens_bumps(rng, lens, rank, 1, radius)
        try:
            r = interior_radius(lens, b.centers[0], radius, margin)
        except ValidationError:
            continue
        if r >= min_radius:
            centers.append(b.centers[0])
            radii.append(r)
        if len(centers) == n_bumps:
            coeffs = rng.standard_normal((n_bumps, mi.n_components(lens.dim, rank)))
            return BumpTensorField(np.array(centers), np.array(radii), coeffs, rank, 3.0)
    raise ValidationError(f"could not place {n_bumps} interior bumps of radius >= {min_radius}")


@dataclass
class Setup:
    cfg: dict
    metric: ChartMetric
    lens: BoundaryChart
    grid: Grid
    fan: object
    trace: object
    x: np.ndarray
    U: np.ndarray

    @property
    def interior(self) -> np.ndarray:
        inv = self.cfg["inversion"]
        return self.U & (self.x >= inv["interior_x"]) & (self.lens.rho(self.grid.nodes) >= inv["interior_rho"])


def build_setup(cfg, trace: bool = True) -> Setup:
    metric = build_metric(cfg)
    lens = build_lens(cfg)
    grid = build_grid(cfg)
    fan = build_fan(cfg, lens)
    tr = trace_fan(fan, metric, lens, cfg["transform"]["step"], cfg["transform"]["tmax"], grid) if trace else None
    x = lens.x(grid.nodes)
    U = active_mask(grid, lens, cfg["inversion"]["x_min"])
    return Setup(cfg, metric, lens, grid, fan, tr, x, U)


def build_phantom(cfg, setup: Setup, rng=None):
    """(grid field, field used for the data).  The data field may be analytic."""
    rng = np.random.default_rng(cfg["seed"]) if rng is None else rng
    ph = cfg["phantom"]
    kind = ph["kind"]
    g = setup.grid
    if kind == "zero":
        f = SymmetricTensorField(g, 4)
        return f, f
    if kind == "metric":
        a = MetricSquareField(setup.metric)
        return a.sample(g), a
    if kind == "file":
        from .tensors import read_tensor_file
        f = read_tensor_file(ph["file"])
        return f, f
    if kind == "potential":
        v = interior_bumps(rng, setup.lens, 3, ph["n_bumps"], ph["radius"])
        a = SymDiffField(v, setup.metric)
        return a.sample(g), a
    b = lens_bumps(rng, setup.lens, 4, ph["n_bumps"], ph["radius"])
    f = SymmetricTensorField(g, 4, b.evaluate(g.nodes) * setup.U[:, None])
    if kind == "bumps":
        return f, f
    u = gauge_representative(f, cfg["weight"]["F"], setup.x, setup.U, setup.metric)
    return u, u


def simulate(cfg, setup: Optional[Setup] = None, rng=None):
    """Forward data for the configured phantom: (RayData, grid phantom, setup)."""
    setup = setup or build_setup(cfg)
    f_grid, f_data = build_phantom(cfg, setup, rng)
    data = forward_fan(f_data, setup.fan, setup.metric, setup.lens, trace=setup.trace)
    return data, f_grid, setup


def reconstruct(cfg, data, setup: Setup):
    inv = cfg["inversion"]
    return invert_local(data, setup.fan, setup.metric, setup.lens, setup.grid, cfg["weight"]["F"],
                        reg=inv["mu_rel"], x_min=inv["x_min"], trace=setup.trace, maxiter=inv["maxiter"],
                        rtol=inv["rtol"], mask=setup.U, weight_data=inv["weight_data"])


def solenoidal_errors(cfg, setup: Setup, u, f_grid, gauge=None) -> dict:
    """Errors of u against the solenoidal representative of the phantom on interior nodes.

    ``gauge`` is an optional ``(x, mask)`` pair defining the reference gauge; it
    must match the gauge u was projected in (layer stripping uses the deepest
    chart on the union of the levels).
    """
    x, mask = gauge if gauge is not None else (setup.x, setup.U)
    ref = gauge_representative(f_grid, cfg["weight"]["F"], x, mask, setup.metric)
    inner = setup.interior
    out = {"interior_nodes": int(inner.sum())}
    for frame in ("sc", "chart"):
        out[f"error_{frame}"] = relative_error(u, ref, inner, setup.lens, frame)
    zero = SymmetricTensorField(u.grid, 4)
    for frame in ("sc", "chart"):
        fn = relative_error(f_grid, zero, inner, setup.lens, frame)
        un = relative_error(u, zero, inner, setup.lens, frame)
        out[f"solenoidal_energy_{frame}"] = (un / fn) ** 2 if fn > 0 else 0.0
    return out


def demo_qp(cfg, setup: Optional[Setup] = None, rng=None) -> dict:
    """Anisotropic stiffness perturbation on the radial medium, inverted on the lens."""
    rng = np.random.default_rng(cfg["seed"]) if rng is None else rng
    setup = setup or build_setup(cfg)
    q = cfg["qp"]
    a0 = random_stiffness(rng, 3, q["scale"])
    # smooth window that vanishes where the inversion has no unknowns
    window = LensWindow(setup.lens, cfg["inversion"]["x_min"], q["x_max"], q["width"])
    field = QPField(a0, build_profile(cfg), q["rho"], window)
    data = forward_fan(field, setup.fan, setup.metric, setup.lens, trace=setup.trace)
    f_grid = SymmetricTensorField(setup.grid, 4, field.evaluate(setup.grid.nodes) * setup.U[:, None])
    res = reconstruct(cfg, data, setup)
    errs = solenoidal_errors(cfg, setup, res.u, f_grid)
    return {"result": res, "data": data, "errors": errs, "field": f_grid, "setup": setup}
