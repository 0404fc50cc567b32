"""Chart metrics, Christoffel symbols, geodesic tracing and foliation checks.

All functions are vectorized over a leading axis of points.  Index convention for
derivative arrays: ``dg[p, k, i, j] = d_k g_ij`` and ``gamma[p, k, i, j] = Gamma^k_ij``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import map_coordinates, spline_filter

from ._validation import check_points, check_random_state, check_scalar
from .errors import (BlowUpError, DegenerateMetricError, EmptyLevelError,
                     InvalidProfileError, NoExitError, ValidationError)
from .grid import Grid

# ---------------------------------------------------------------------------
# radial speed profiles


@dataclass(frozen=True)
class RadialProfile:
    """Wave speed c(r) with derivative, used for conformal metrics c^{-2} ds^2."""

    c: Callable[[np.ndarray], np.ndarray]
    dc: Callable[[np.ndarray], np.ndarray]
    name: str
    params: dict = field(default_factory=dict)

    def __call__(self, r):
        return self.c(np.asarray(r, float))

    @classmethod
    def constant(cls, c0: float = 1.0):
        return cls(lambda r: np.full_like(r, c0, dtype=float), lambda r: np.zeros_like(r, dtype=float),
                   "constant", {"c0": c0})

    @classmethod
    def linear(cls, a: float = 2.0, b: float = 1.0):
        """c(r) = a - b r."""
        return cls(lambda r: a - b * r, lambda r: np.full_like(r, -b, dtype=float), "linear",
                   {"a": a, "b": b})

    @classmethod
    def exponential(cls, a: float = 1.0, k: float = 2.0):
        """c(r) = a exp(k r)."""
        return cls(lambda r: a * np.exp(k * r), lambda r: a * k * np.exp(k * r), "exponential",
                   {"a": a, "k": k})

    @classmethod
    def table(cls, radii, speeds):
        """Monotone piecewise-cubic (PCHIP) interpolation of a tabulated profile."""
        r = np.asarray(radii, float)
        v = np.asarray(speeds, float)
        if r.ndim != 1 or r.shape != v.shape or len(r) < 2 or np.any(np.diff(r) <= 0):
            raise InvalidProfileError("table needs increasing radii and matching speeds")
        if np.any(v <= 0):
            raise InvalidProfileError("tabulated speeds must be positive")
        pc = PchipInterpolator(r, v, extrapolate=True)
        d = pc.derivative()
        return cls(lambda x: pc(x), lambda x: d(x), "table",
                   {"radii": r.tolist(), "speeds": v.tolist()})

    @classmethod
    def from_config(cls, cfg: dict):
        kind = cfg.get("kind", "constant")
        if kind == "constant":
            return cls.constant(float(cfg.get("c0", 1.0)))
        if kind == "linear":
            return cls.linear(float(cfg.get("a", 2.0)), float(cfg.get("b", 1.0)))
        if kind == "exponential":
            return cls.exponential(float(cfg.get("a", 1.0)), float(cfg.get("k", 2.0)))
        if kind == "table":
            return cls.table(cfg["radii"], cfg["speeds"])
        raise InvalidProfileError(f"unknown profile kind {kind!r}")


@dataclass(frozen=True)
class HerglotzResult:
    passed: bool
    margin: float

    def __bool__(self):
        return self.passed


def herglotz_check(profile: RadialProfile, radius: float = 1.0, n_samples: int = 2001) -> HerglotzResult:
    """Finite-difference test of d/dr (r / c(r)) > 0 on the interior nodes of (0, radius]."""
    r = np.linspace(0.0, radius, n_samples)[1:]
    c = np.asarray(profile(r), float)
    if np.any(~np.isfinite(c)) or np.any(c <= 0):
        raise InvalidProfileError("speed profile must be positive on (0, R]")
    q = r / c
    h = r[1] - r[0]
    dq = (q[2:] - q[:-2]) / (2 * h)
    margin = float(np.min(dq))
    return HerglotzResult(bool(margin > 0), margin)


# ---------------------------------------------------------------------------
# metrics


class ChartMetric:
    """Riemannian metric on a single coordinate chart.

    Use the constructors :meth:`euclidean`, :meth:`conformal_radial` and
    :meth:`from_grid`; the generic constructor takes vectorized callables
    ``g(points) -> (P, n, n)`` and ``dg(points) -> (P, n, n, n)``.
    """

    def __init__(self, dim: int, g: Callable, dg: Callable, provenance: str = "custom",
                 profile: Optional[RadialProfile] = None, grid: Optional[Grid] = None):
        check_scalar(dim, "dim", lower=2, integer=True)
        self.dim = int(dim)
        self._g = g
        self._dg = dg
        self.provenance = provenance
        self.profile = profile
        self.grid = grid

    def __repr__(self):
        extra = f", profile={self.profile.name}" if self.profile is not None else ""
        return f"ChartMetric(dim={self.dim}, provenance={self.provenance!r}{extra})"

    # constructors -----------------------------------------------------------
    @classmethod
    def euclidean(cls, dim: int = 3):
        def g(p):
            return np.broadcast_to(np.eye(dim), (len(p), dim, dim)).copy()

        def dg(p):
            return np.zeros((len(p), dim, dim, dim))

        return cls(dim, g, dg, "euclidean")

    @classmethod
    def conformal_radial(cls, profile: RadialProfile, dim: int = 3):
        """g = c(|p|)^{-2} delta."""

        def g(p):
            c = profile(np.linalg.norm(p, axis=1))
            return (c**-2)[:, None, None] * np.eye(dim)

        def dg(p):
            r = np.linalg.norm(p, axis=1)
            c = profile(r)
            dc = profile.dc(r)
            with np.errstate(invalid="ignore", divide="ignore"):
                rhat = np.where(r[:, None] > 0, p / np.where(r > 0, r, 1.0)[:, None], 0.0)
            grad = (-2.0 * c**-3 * dc)[:, None] * rhat
            return grad[:, :, None, None] * np.eye(dim)

        return cls(dim, g, dg, "conformal_radial", profile=profile)

    @classmethod
    def from_grid(cls, grid: Grid, samples: np.ndarray, fd_step: float = 1e-5):
        """Metric sampled on grid nodes, interpolated by cubic splines.

        Derivatives use central differences with step ``fd_step`` times the chart
        diameter.
        """
        n = grid.dim
        samples = np.asarray(samples, float).reshape(grid.shape + (n, n))
        if not np.allclose(samples, np.swapaxes(samples, -1, -2), atol=1e-14, rtol=0):
            raise DegenerateMetricError("grid metric samples are not symmetric")
        coeffs = [[spline_filter(samples[..., i, j], order=3, mode="nearest") for j in range(n)]
                  for i in range(n)]
        lower = np.array(grid.lower)
        hsp = grid.spacing
        scale = float(np.linalg.norm(np.array(grid.upper) - lower))
        step = fd_step * scale

        def g(p):
            p = np.asarray(p, float)
            coords = ((p - lower) / hsp).T
            out = np.empty((len(p), n, n))
            for i in range(n):
                for j in range(i, n):
                    v = map_coordinates(coeffs[i][j], coords, order=3, mode="nearest", prefilter=False)
                    out[:, i, j] = v
                    out[:, j, i] = v
            return out

        def dg(p):
            p = np.asarray(p, float)
            out = np.empty((len(p), n, n, n))
            for k in range(n):
                e = np.zeros(n)
                e[k] = step
                out[:, k] = (g(p + e) - g(p - e)) / (2 * step)
            return out

        return cls(n, g, dg, "user_grid", grid=grid)

    # evaluation -------------------------------------------------------------
    def g(self, points) -> np.ndarray:
        return self._g(check_points(points, self.dim))

    def dg(self, points) -> np.ndarray:
        return self._dg(check_points(points, self.dim))

    def inverse(self, points) -> np.ndarray:
        return np.linalg.inv(self.g(points))

    def norm(self, points, v) -> np.ndarray:
        g = self.g(points)
        v = np.asarray(v, float).reshape(-1, self.dim)
        return np.sqrt(np.einsum("pi,pij,pj->p", v, g, v))

    def christoffel(self, points, check: bool = True) -> np.ndarray:
        """Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij), shape (P, n, n, n)."""
        p = check_points(points, self.dim)
        if self.provenance == "euclidean":
            return np.zeros((len(p), self.dim, self.dim, self.dim))
        g = self._g(p)
        if check:
            ev = np.linalg.eigvalsh(0.5 * (g + np.swapaxes(g, 1, 2)))
            if not np.all(np.isfinite(ev)) or np.any(ev[:, 0] <= 0):
                raise DegenerateMetricError("metric is not positive definite at some point")
        if self.provenance == "conformal_radial":
            return _conformal_christoffel(p, self.profile, self.dim)
        dg = self._dg(p)
        term = np.einsum("pijl->plij", dg) + np.einsum("pjil->plij", dg) - dg
        gam = 0.5 * np.einsum("pkl,plij->pkij", np.linalg.inv(g), term)
        return 0.5 * (gam + np.swapaxes(gam, 2, 3))

    def acceleration(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Geodesic acceleration -Gamma^k_ij v^i v^j, vectorized, without checks."""
        if self.provenance == "euclidean":
            return np.zeros_like(v)
        if self.provenance == "conformal_radial":
            gphi = _grad_phi(p, self.profile)
            vg = np.sum(v * gphi, axis=1, keepdims=True)
            vv = np.sum(v * v, axis=1, keepdims=True)
            return -(2.0 * vg * v - vv * gphi)
        gam = self.christoffel(p, check=False)
        return -np.einsum("pkij,pi,pj->pk", gam, v, v)


def _grad_phi(p, profile):
    """Gradient of phi = -log c(|p|)."""
    r = np.linalg.norm(p, axis=1)
    c = profile(r)
    dc = profile.dc(r)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r[:, None] > 0, (-dc / c / safe)[:, None] * p, 0.0)


def _conformal_christoffel(p, profile, n):
    gphi = _grad_phi(p, profile)
    eye = np.eye(n)
    gam = (np.einsum("ki,pj->pkij", eye, gphi) + np.einsum("kj,pi->pkij", eye, gphi)
           - np.einsum("ij,pk->pkij", eye, gphi))
    return gam


def write_metric_file(path, grid: Grid, samples: np.ndarray) -> None:
    """Binary TRAYMET1 file: magic, n, grid shape, bounds, then row-major g_ij samples."""
    n = grid.dim
    samples = np.asarray(samples, "<f8").reshape(grid.shape + (n, n))
    with open(path, "wb") as fh:
        fh.write(b"TRAYMET1")
        fh.write(struct.pack("<q", n))
        fh.write(struct.pack(f"<{n}q", *grid.shape))
        fh.write(struct.pack(f"<{2 * n}d", *grid.lower, *grid.upper))
        fh.write(np.ascontiguousarray(samples).tobytes())


def read_metric_file(path):
    """Inverse of :func:`write_metric_file`; returns ``(grid, samples)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != b"TRAYMET1":
        raise ValidationError(f"{path}: bad magic, expected TRAYMET1")
    off = 8
    (n,) = struct.unpack_from("<q", data, off)
    off += 8
    shape = struct.unpack_from(f"<{n}q", data, off)
    off += 8 * n
    bounds = struct.unpack_from(f"<{2 * n}d", data, off)
    off += 16 * n
    grid = Grid(bounds[:n], bounds[n:], shape)
    count = int(np.prod(shape)) * n * n
    if len(data) - off != 8 * count:
        raise ValidationError(f"{path}: truncated metric samples")
    samples = np.frombuffer(data, "<f8", count, off).reshape(tuple(shape) + (n, n)).copy()
    return grid, samples


# ---------------------------------------------------------------------------
# boundary charts


class BoundaryChart:
    """Boundary defining function rho and foliation function x~ on a chart.

    ``rho >= 0`` inside M.  ``x = x~ + c`` is the artificial boundary-distance
    coordinate; the lens is ``{x >= 0} inside M``.  Orientation: x~ increases
    toward the boundary point the lens is attached to, so x~ <= 0 in M near it.

    ``from_xy(x, y)`` maps lens coordinates to chart points and ``to_xy`` is its
    inverse; ``jac_xy`` returns the columns (d/dx, d/dy_1, ...) as an array
    (P, n, n) with the coordinate vector fields in the last axis.
    """

    def __init__(self, dim: int, rho: Callable, xtilde: Callable, c_offset: float, *,
                 grad_xtilde: Optional[Callable] = None, from_xy: Optional[Callable] = None,
                 to_xy: Optional[Callable] = None, jac_xy: Optional[Callable] = None,
                 bbox=None, name: str = "custom"):
        check_scalar(c_offset, "c_offset", lower=0, lower_inclusive=False)
        self.dim = int(dim)
        self._rho = rho
        self._xtilde = xtilde
        self.c_offset = float(c_offset)
        self._grad_xtilde = grad_xtilde
        self._from_xy = from_xy
        self._to_xy = to_xy
        self._jac_xy = jac_xy
        self.bbox = (np.array(bbox[0], float), np.array(bbox[1], float)) if bbox is not None else (
            -np.ones(dim), np.ones(dim))
        self.name = name

    def __repr__(self):
        return f"BoundaryChart({self.name!r}, dim={self.dim}, c={self.c_offset})"

    def rho(self, points):
        return self._rho(check_points(points, self.dim))

    def xtilde(self, points):
        return self._xtilde(check_points(points, self.dim))

    def x(self, points):
        return self.xtilde(points) + self.c_offset

    def inside(self, points, tol: float = 0.0):
        return self.rho(points) >= -tol

    def grad_xtilde(self, points, step: float = 1e-6):
        p = check_points(points, self.dim)
        if self._grad_xtilde is not None:
            return self._grad_xtilde(p)
        out = np.empty_like(p)
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = step
            out[:, k] = (self._xtilde(p + e) - self._xtilde(p - e)) / (2 * step)
        return out

    def from_xy(self, x, y):
        if self._from_xy is None:
            raise ValidationError(f"chart {self.name!r} has no (x, y) parametrization")
        x = np.atleast_1d(np.asarray(x, float))
        y = np.asarray(y, float).reshape(len(x), self.dim - 1)
        return self._from_xy(x, y)

    def to_xy(self, points):
        if self._to_xy is None:
            raise ValidationError(f"chart {self.name!r} has no (x, y) parametrization")
        return self._to_xy(check_points(points, self.dim))

    def jac_xy(self, x, y, step: float = 1e-6):
        x = np.atleast_1d(np.asarray(x, float))
        y = np.asarray(y, float).reshape(len(x), self.dim - 1)
        if self._jac_xy is not None:
            return self._jac_xy(x, y)
        out = np.empty((len(x), self.dim, self.dim))
        out[:, :, 0] = (self.from_xy(x + step, y) - self.from_xy(x - step, y)) / (2 * step)
        for i in range(self.dim - 1):
            e = np.zeros(self.dim - 1)
            e[i] = step
            out[:, :, i + 1] = (self.from_xy(x, y + e) - self.from_xy(x, y - e)) / (2 * step)
        return out

    def with_offset(self, c_offset: float) -> "BoundaryChart":
        new = BoundaryChart(self.dim, self._rho, self._xtilde, c_offset, grad_xtilde=self._grad_xtilde,
                            bbox=self.bbox, name=self.name)
        shift = c_offset - self.c_offset
        if self._from_xy is not None:
            fx, tx, jx = self._from_xy, self._to_xy, self._jac_xy
            new._from_xy = lambda x, y: fx(x - shift, y)
            new._to_xy = lambda p: (lambda xy: (xy[0] + shift, xy[1]))(tx(p))
            new._jac_xy = None if jx is None else (lambda x, y: jx(x - shift, y))
        return new

    def shifted(self, tau: float) -> "BoundaryChart":
        """Chart for the level x~ = tau: x~_tau = x~ - tau, same offset c."""
        xt = self._xtilde
        gx = self._grad_xtilde
        new = BoundaryChart(self.dim, self._rho, lambda p: xt(p) - tau, self.c_offset,
                            grad_xtilde=gx, bbox=self.bbox, name=f"{self.name}@{tau:g}")
        if self._from_xy is not None:
            fx, tx, jx = self._from_xy, self._to_xy, self._jac_xy
            new._from_xy = lambda x, y: fx(x + tau, y)
            new._to_xy = lambda p: (lambda xy: (xy[0] - tau, xy[1]))(tx(p))
            new._jac_xy = None if jx is None else (lambda x, y: jx(x + tau, y))
        return new

    # built-in charts ----------------------------------------------------------
    @classmethod
    def lens(cls, dim: int = 3, radius: float = 1.0, c: float = 0.5, kappa: float = 0.25):
        """Ball of given radius, foliation x~ = p_n - R + kappa |p'|^2 at the north pole.

        Level sets are downward paraboloids; with kappa < 1/(2R) the level x~ = 0
        touches the ball only at the pole.
        """
        R = float(radius)

        def rho(p):
            return R - np.linalg.norm(p, axis=1)

        def xtilde(p):
            return p[:, -1] - R + kappa * np.sum(p[:, :-1] ** 2, axis=1)

        def grad(p):
            out = np.empty_like(p)
            out[:, :-1] = 2 * kappa * p[:, :-1]
            out[:, -1] = 1.0
            return out

        def from_xy(x, y):
            pn = x - c + R - kappa * np.sum(y**2, axis=1)
            return np.concatenate([y, pn[:, None]], axis=1)

        def to_xy(p):
            return xtilde(p) + c, p[:, :-1].copy()

        def jac(x, y):
            P = len(x)
            out = np.zeros((P, dim, dim))
            out[:, -1, 0] = 1.0
            for i in range(dim - 1):
                out[:, i, i + 1] = 1.0
                out[:, -1, i + 1] = -2 * kappa * y[:, i]
            return out

        return cls(dim, rho, xtilde, c, grad_xtilde=grad, from_xy=from_xy, to_xy=to_xy, jac_xy=jac,
                   bbox=(-R * np.ones(dim), R * np.ones(dim)), name="lens")

    @classmethod
    def ball(cls, dim: int = 3, radius: float = 1.0, c: float = 0.5):
        """Ball with radial foliation x~ = |p| - R; y = first n-1 components of p/|p|."""
        R = float(radius)

        def rho(p):
            return R - np.linalg.norm(p, axis=1)

        def xtilde(p):
            return np.linalg.norm(p, axis=1) - R

        def grad(p):
            r = np.linalg.norm(p, axis=1)
            return p / np.where(r > 0, r, 1.0)[:, None]

        def from_xy(x, y):
            r = x - c + R
            last = np.sqrt(np.clip(1 - np.sum(y**2, axis=1), 0, None))
            return r[:, None] * np.concatenate([y, last[:, None]], axis=1)

        def to_xy(p):
            r = np.linalg.norm(p, axis=1)
            return r - R + c, p[:, :-1] / r[:, None]

        return cls(dim, rho, xtilde, c, grad_xtilde=grad, from_xy=from_xy, to_xy=to_xy,
                   bbox=(-R * np.ones(dim), R * np.ones(dim)), name="ball")


# ---------------------------------------------------------------------------
# geodesics


@dataclass
class GeodesicPath:
    points: np.ndarray
    velocities: np.ndarray
    t: np.ndarray
    exited: bool

    @property
    def length(self) -> float:
        return float(self.t[-1] - self.t[0])

    def __len__(self):
        return len(self.t)


@dataclass
class RayBundle:
    """Many geodesics stored back to back; ray i occupies ``offsets[i]:offsets[i+1]``."""

    points: np.ndarray
    velocities: np.ndarray
    t: np.ndarray
    offsets: np.ndarray
    exited: np.ndarray
    status: np.ndarray  # 0 ok, 1 no exit before tmax, 2 blow-up

    def __len__(self):
        return len(self.exited)

    def path(self, i: int) -> GeodesicPath:
        s = slice(self.offsets[i], self.offsets[i + 1])
        return GeodesicPath(self.points[s], self.velocities[s], self.t[s], bool(self.exited[i]))

    @property
    def lengths(self) -> np.ndarray:
        lo = self.offsets[:-1]
        hi = self.offsets[1:] - 1
        out = np.zeros(len(self))
        ok = hi >= lo
        out[ok] = self.t[hi[ok]] - self.t[lo[ok]]
        return out

    @property
    def ray_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), np.diff(self.offsets))

    def trapezoid_weights(self) -> np.ndarray:
        """Per-sample trapezoid weights along each ray."""
        w = np.zeros(len(self.t))
        dt = np.diff(self.t)
        same = self.ray_index[1:] == self.ray_index[:-1]
        dt = np.where(same, dt, 0.0)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
        return w


def _rk4(metric, p, v, h):
    h = np.asarray(h, float).reshape(-1, 1) if np.ndim(h) else h
    k1p, k1v = v, metric.acceleration(p, v)
    k2p, k2v = v + 0.5 * h * k1v, metric.acceleration(p + 0.5 * h * k1p, v + 0.5 * h * k1v)
    k3p, k3v = v + 0.5 * h * k2v, metric.acceleration(p + 0.5 * h * k2p, v + 0.5 * h * k2v)
    k4p, k4v = v + h * k3v, metric.acceleration(p + h * k3p, v + h * k3v)
    return (p + h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p),
            v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v))


def trace_geodesics(metric: ChartMetric, boundary: Optional[BoundaryChart], p0, v0, step: float = 1e-3,
                    tmax: float = 10.0, bisect_tol: float = 1e-6) -> RayBundle:
    """Integrate many geodesics forward with fixed-step RK4 until rho = 0 or tmax.

    The exit is located by bisection on the last step to within ``step*bisect_tol``;
    the final sample is the last bracketing point still inside (rho >= 0).
    """
    check_scalar(step, "step", lower=0, lower_inclusive=False)
    P = check_points(p0, metric.dim).copy()
    V = check_points(v0, metric.dim).copy()
    R = len(P)
    pts, vels, ts, rid = [P.copy()], [V.copy()], [np.zeros(R)], [np.arange(R)]
    active = np.ones(R, bool)
    exited = np.zeros(R, bool)
    status = np.zeros(R, np.int8)
    if boundary is not None:
        outside = boundary.rho(P) < 0
        active &= ~outside
        exited |= outside
    t = 0.0
    nsteps = int(np.ceil(tmax / step))
    n_bisect = int(np.ceil(np.log2(1.0 / bisect_tol))) + 1
    for _ in range(nsteps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        p, v = P[idx], V[idx]
        h = min(step, tmax - t)
        pn, vn = _rk4(metric, p, v, h)
        bad = ~(np.all(np.isfinite(pn), axis=1) & np.all(np.isfinite(vn), axis=1))
        if bad.any():
            status[idx[bad]] = 2
            active[idx[bad]] = False
            keep = ~bad
            idx, p, v, pn, vn = idx[keep], p[keep], v[keep], pn[keep], vn[keep]
        if boundary is not None and len(idx):
            out = boundary.rho(pn) < 0
        else:
            out = np.zeros(len(idx), bool)
        if out.any():
            io = np.flatnonzero(out)
            lo = np.zeros(len(io))
            hi = np.full(len(io), h)
            for _ in range(n_bisect):
                mid = 0.5 * (lo + hi)
                pm, _ = _rk4(metric, p[io], v[io], mid)
                ins = boundary.rho(pm) >= 0
                lo = np.where(ins, mid, lo)
                hi = np.where(ins, hi, mid)
            pe, ve = _rk4(metric, p[io], v[io], lo)
            good = lo > 0
            pn[io], vn[io] = pe, ve
            tt = np.full(len(idx), t + h)
            tt[io] = t + lo
            sel = np.ones(len(idx), bool)
            sel[io[~good]] = False
            exited[idx[io]] = True
            active[idx[io]] = False
        else:
            tt = np.full(len(idx), t + h)
            sel = np.ones(len(idx), bool)
        P[idx], V[idx] = pn, vn
        pts.append(pn[sel])
        vels.append(vn[sel])
        ts.append(tt[sel])
        rid.append(idx[sel])
        t += h
        if t >= tmax - 1e-15:
            break
    status[active] = np.where(status[active] == 0, 1, status[active])
    rid = np.concatenate(rid)
    order = np.argsort(rid, kind="stable")
    counts = np.bincount(rid, minlength=R)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return RayBundle(np.concatenate(pts)[order], np.concatenate(vels)[order], np.concatenate(ts)[order],
                     offsets, exited, status)


def trace_chords(metric: ChartMetric, boundary: BoundaryChart, p0, v0, step: float = 1e-3,
                 tmax: float = 10.0) -> RayBundle:
    """Complete geodesics through the given points: backward and forward halves joined.

    The parameter t starts at 0 at the entry point.
    """
    P = check_points(p0, metric.dim)
    V = check_points(v0, metric.dim)
    fw = trace_geodesics(metric, boundary, P, V, step, tmax)
    bw = trace_geodesics(metric, boundary, P, -V, step, tmax)
    R = len(P)
    pts, vels, ts, counts = [], [], [], np.zeros(R, np.int64)
    for i in range(R):
        sb = slice(bw.offsets[i], bw.offsets[i + 1])
        sf = slice(fw.offsets[i], fw.offsets[i + 1])
        tb = bw.t[sb]
        tmin = tb[-1]
        pts.append(bw.points[sb][::-1])
        vels.append(-bw.velocities[sb][::-1])
        ts.append(tmin - tb[::-1])
        pts.append(fw.points[sf][1:])
        vels.append(fw.velocities[sf][1:])
        ts.append(tmin + fw.t[sf][1:])
        counts[i] = (sb.stop - sb.start) + (sf.stop - sf.start) - 1
    offsets = np.concatenate([[0], np.cumsum(counts)])
    status = np.maximum(fw.status, bw.status)
    return RayBundle(np.concatenate(pts), np.concatenate(vels), np.concatenate(ts), offsets,
                     fw.exited & bw.exited, status)


def integrate_geodesic(metric: ChartMetric, boundary: Optional[BoundaryChart], p0, v0,
                       step: float = 1e-3, tmax: float = 10.0, require_exit: bool = False) -> GeodesicPath:
    """Single geodesic from (p0, v0) with |v0|_g = 1; stops at the boundary or tmax."""
    p0 = check_points(p0, metric.dim)
    v0 = check_points(v0, metric.dim)
    speed = metric.norm(p0, v0)[0]
    if abs(speed - 1.0) > 1e-12:
        raise ValidationError(f"initial velocity must be unit speed, |v0|_g = {speed!r}")
    b = trace_geodesics(metric, boundary, p0, v0, step, tmax)
    if b.status[0] == 2:
        raise BlowUpError("non-finite geodesic state")
    path = b.path(0)
    if require_exit and not path.exited:
        raise NoExitError(f"geodesic did not reach the boundary before tmax={tmax}")
    return path


def normalize_velocity(metric: ChartMetric, points, v) -> np.ndarray:
    v = np.asarray(v, float).reshape(-1, metric.dim)
    return v / metric.norm(points, v)[:, None]


# ---------------------------------------------------------------------------
# convexity probe


@dataclass(frozen=True)
class ProbeResult:
    passed: bool
    worst: float
    worst_point: np.ndarray
    worst_direction: np.ndarray

    def __bool__(self):
        return self.passed


def _orth_complement(gvec):
    """Orthonormal (Euclidean) basis of the complement of each row vector: (P, n, n-1)."""
    P, n = gvec.shape
    out = np.empty((P, n, n - 1))
    for i in range(P):
        q, _ = np.linalg.qr(np.column_stack([gvec[i], np.eye(n)]))
        out[i] = q[:, 1:n]
    return out


def convexity_probe(metric: ChartMetric, boundary: BoundaryChart, level: float, samples: int = 24,
                    directions: int = 6, *, sign: float = 1.0, delta: float = 1e-2, step: float = 1e-3,
                    tol: float = 1e-8, seed=0) -> ProbeResult:
    """Check d^2/dt^2 (sign * x~)(gamma) < 0 for geodesics tangent to {x~ = level}.

    Points on the level set are found by projecting random points of M onto it.
    The second derivative is a centered second difference with spacing ``delta``.
    Passes iff every value is below ``-tol``.
    """
    check_scalar(samples, "samples", lower=1, integer=True)
    rng = check_random_state(seed)
    lo, hi = boundary.bbox
    n = metric.dim
    found = []
    for _ in range(20):
        cand = lo + (hi - lo) * rng.random((max(200, 20 * samples), n))
        for _ in range(30):
            gx = boundary.grad_xtilde(cand)
            r = boundary.xtilde(cand) - level
            cand = cand - (r / np.maximum(np.sum(gx**2, axis=1), 1e-300))[:, None] * gx
        ok = (np.abs(boundary.xtilde(cand) - level) < 1e-10) & (boundary.rho(cand) > 2 * delta)
        found.extend(cand[ok])
        if len(found) >= samples:
            break
    if not found:
        raise EmptyLevelError(f"level set x~ = {level} has no points inside M")
    pts = np.array(found[:samples])
    basis = _orth_complement(boundary.grad_xtilde(pts))
    coef = rng.standard_normal((len(pts), directions, n - 1))
    coef /= np.linalg.norm(coef, axis=2, keepdims=True)
    dirs = np.einsum("pnk,pdk->pdn", basis, coef).reshape(-1, n)
    base = np.repeat(pts, directions, axis=0)
    dirs = normalize_velocity(metric, base, dirs)
    nsub = max(1, int(round(delta / step)))
    h = delta / nsub
    pf, vf = base.copy(), dirs.copy()
    pb, vb = base.copy(), -dirs.copy()
    for _ in range(nsub):
        pf, vf = _rk4(metric, pf, vf, h)
        pb, vb = _rk4(metric, pb, vb, h)
    f0 = sign * boundary.xtilde(base)
    d2 = (sign * boundary.xtilde(pf) - 2 * f0 + sign * boundary.xtilde(pb)) / delta**2
    w = int(np.argmax(d2))
    return ProbeResult(bool(d2[w] < -tol), float(d2[w]), base[w], dirs[w])


# ---------------------------------------------------------------------------
# local fans


@dataclass(frozen=True)
class FanParams:
    """Fan of initial conditions (x, y, lambda, omega) with |lambda| <= C2 x."""

    x_values: tuple
    y_values: np.ndarray
    n_lambda: int = 5
    n_omega: int = 8
    C2: float = 1.0
    omega_offset: float = 0.0

    def __post_init__(self):
        check_scalar(self.C2, "C2", lower=0, lower_inclusive=False)
        check_scalar(self.n_lambda, "n_lambda", lower=1, integer=True)
        check_scalar(self.n_omega, "n_omega", lower=1, integer=True)
        object.__setattr__(self, "x_values", tuple(float(v) for v in np.atleast_1d(self.x_values)))
        object.__setattr__(self, "y_values", np.atleast_2d(np.asarray(self.y_values, float)))


def sphere_samples(dim: int, count: int, offset: float = 0.0) -> np.ndarray:
    """Deterministic points on the unit sphere S^{dim-1} in R^dim."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])[: max(1, min(count, 2))]
    if dim == 2:
        th = offset + 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(th), np.sin(th)])
    if dim == 3:
        k = np.arange(count) + 0.5
        z = 1 - 2 * k / count
        phi = offset + np.pi * (3 - np.sqrt(5)) * k
        s = np.sqrt(1 - z**2)
        return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    v = np.random.default_rng(12345).standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class GeodesicFan:
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    omega: np.ndarray
    points: np.ndarray
    admissible: np.ndarray
    params: Optional[FanParams] = None

    def __len__(self):
        return len(self.x)

    def subset(self, mask) -> "GeodesicFan":
        m = np.asarray(mask)
        return GeodesicFan(self.x[m], self.y[m], self.lam[m], self.omega[m], self.points[m],
                           self.admissible[m], self.params)

    def velocities(self, metric: ChartMetric, boundary: BoundaryChart) -> np.ndarray:
        """Unit-speed initial velocities lambda d_x + omega . d_y in chart coordinates."""
        J = boundary.jac_xy(self.x, self.y)
        coef = np.column_stack([self.lam, self.omega])
        v = np.einsum("pij,pj->pi", J, coef)
        return normalize_velocity(metric, self.points, v)


def local_geodesic_fan(boundary: BoundaryChart, params: FanParams) -> GeodesicFan:
    """Enumerate Omega-local initial conditions.

    For each base point (x, y): lambda on a uniform grid of [-C2 x, C2 x] (only 0 at
    x = 0), omega on the unit sphere of the y-tangent space.  Entries with x < 0 or
    base points outside M are kept but flagged inadmissible.
    """
    n = boundary.dim
    ys = params.y_values.reshape(-1, n - 1)
    om = sphere_samples(n - 1, params.n_omega, params.omega_offset)
    X, Y, L, O = [], [], [], []
    for x in params.x_values:
        if x == 0:
            lams = np.array([0.0])
        else:
            lams = np.linspace(-params.C2 * abs(x), params.C2 * abs(x), params.n_lambda)
        for y in ys:
            for lam in lams:
                for o in om:
                    X.append(x)
                    Y.append(y)
                    L.append(lam)
                    O.append(o)
    X = np.array(X)
    Y = np.array(Y).reshape(-1, n - 1)
    L = np.array(L)
    O = np.array(O).reshape(-1, n - 1)
    if len(X) == 0:
        return GeodesicFan(X, Y, L, O, np.zeros((0, n)), np.zeros(0, bool), params)
    pts = boundary.from_xy(X, Y)
    adm = (X >= 0) & (boundary.rho(pts) >= 0)
    return GeodesicFan(X, Y, L, O, pts, adm, params)
