"""Geodesic ray transform of symmetric tensor fields over local fans."""
from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field
from math import gamma, pi
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import _multiindex as mi
from ._validation import check_scalar
from .errors import (CoverageError, CoverageWarning, NoExitError, OutOfDomainError,
                     ValidationError)
from .geometry import (BoundaryChart, ChartMetric, GeodesicFan, GeodesicPath, RayBundle,
                       trace_chords)
from .grid import Grid
from .tensors import (PolynomialTensorField, SymmetricTensorField,
                      check_stiffness, contract_with_velocity, stiffness_to_symmetric)

# RayData status codes
OK, NO_EXIT, BLOW_UP, OUT_OF_GRID, INADMISSIBLE, NON_LOCAL = 0, 1, 2, 3, 4, 5
STATUS_NAMES = {OK: "ok", NO_EXIT: "no_exit", BLOW_UP: "blow_up", OUT_OF_GRID: "out_of_grid",
                INADMISSIBLE: "inadmissible", NON_LOCAL: "non_local"}


@dataclass(frozen=True)
class CutoffProfile:
    """Even, non-negative cutoff chi(s).

    ``gaussian``: exp(-s^2 / (2 nu)).  ``compact_bump``: e * exp(-1 / (1 - (s/w)^2)) on
    |s| < w, so chi(0) = 1.  ``constant``: chi = 1 (used for flat adjointness checks).
    """

    kind: str = "gaussian"
    nu: float = 0.25
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "compact_bump", "constant"):
            raise ValidationError(f"unknown cutoff kind {self.kind!r}")
        if self.kind == "gaussian":
            check_scalar(self.nu, "nu", lower=0, lower_inclusive=False)
        if self.kind == "compact_bump":
            check_scalar(self.width, "width", lower=0, lower_inclusive=False)

    @classmethod
    def gaussian(cls, nu: float = 0.25):
        return cls("gaussian", nu=nu)

    @classmethod
    def compact_bump(cls, width: float = 1.0):
        return cls("compact_bump", width=width)

    def __call__(self, s):
        s = np.asarray(s, float)
        if self.kind == "gaussian":
            return np.exp(-s**2 / (2 * self.nu))
        if self.kind == "constant":
            return np.ones_like(s)
        t = (s / self.width) ** 2
        out = np.zeros_like(s)
        inside = t < 1
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside]))
        return out

    def support(self, tol: float = 1e-12) -> float:
        """Half-width beyond which chi < tol * chi(0)."""
        if self.kind == "gaussian":
            return float(np.sqrt(-2 * self.nu * np.log(tol)))
        if self.kind == "compact_bump":
            return self.width
        return np.inf


@dataclass
class RayData:
    """Fan parameters with one ray-transform value per entry.

    ``status`` uses the module codes (0 ok, 1 no exit, 2 blow-up, 3 left the grid,
    4 inadmissible, 5 left the region x >= 0).  Entries that could not be evaluated
    carry NaN values, never a silent zero.
    """

    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    omega: np.ndarray
    values: np.ndarray
    lengths: np.ndarray
    admissible: np.ndarray
    status: np.ndarray = None
    points: Optional[np.ndarray] = None
    velocities: Optional[np.ndarray] = None
    errors: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, float).reshape(-1)
        R = len(self.x)
        self.y = np.asarray(self.y, float).reshape(R, -1)
        self.lam = np.asarray(self.lam, float).reshape(R)
        self.omega = np.asarray(self.omega, float).reshape(R, -1)
        self.values = np.asarray(self.values, float).reshape(R)
        self.lengths = np.asarray(self.lengths, float).reshape(R)
        self.admissible = np.asarray(self.admissible, bool).reshape(R)
        if self.status is None:
            self.status = np.where(self.admissible, OK, INADMISSIBLE).astype(np.int8)
        self.status = np.asarray(self.status, np.int8).reshape(R)

    def __len__(self):
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.y.shape[1] + 1

    @property
    def valid(self) -> np.ndarray:
        return self.admissible & np.isfinite(self.values)

    def columns(self):
        k = self.y.shape[1]
        return (["x"] + [f"y{i}" for i in range(k)] + ["lambda"] + [f"omega{i}" for i in range(k)]
                + ["value", "length", "admissible", "status"])

    def table(self) -> np.ndarray:
        return np.column_stack([self.x, self.y, self.lam, self.omega, self.values, self.lengths,
                                self.admissible.astype(float), self.status.astype(float)])

    def to_csv(self, path, delimiter: str = ",") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter)
            w.writerow(self.columns())
            for row in self.table():
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, delimiter: str = ","):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter=delimiter))
        if not rows:
            raise ValidationError(f"{path}: empty ray data file")
        header = rows[0]
        k = sum(1 for h in header if h.startswith("y"))
        data = np.array([[float(v) for v in r] for r in rows[1:]], float).reshape(-1, len(header))
        return cls._from_table(data, k)

    @classmethod
    def _from_table(cls, data, k):
        x = data[:, 0]
        y = data[:, 1:1 + k]
        lam = data[:, 1 + k]
        om = data[:, 2 + k:2 + 2 * k]
        rest = data[:, 2 + 2 * k:]
        status = rest[:, 3] if rest.shape[1] > 3 else None
        return cls(x, y, lam, om, rest[:, 0], rest[:, 1], rest[:, 2] != 0, status)

    def write_binary(self, path) -> None:
        """TRAYRAY1: magic, n, row count, then the text-file columns as 8-byte floats."""
        tab = self.table()
        with open(path, "wb") as fh:
            fh.write(b"TRAYRAY1")
            fh.write(struct.pack("<qq", self.dim, len(self)))
            fh.write(np.ascontiguousarray(tab, "<f8").tobytes())

    @classmethod
    def read_binary(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != b"TRAYRAY1":
            raise ValidationError(f"{path}: bad magic, expected TRAYRAY1")
        n, R = struct.unpack_from("<qq", data, 8)
        ncol = 2 * n + 4
        if len(data) - 24 != 8 * R * ncol:
            raise ValidationError(f"{path}: truncated ray data")
        tab = np.frombuffer(data, "<f8", R * ncol, 24).reshape(R, ncol)
        return cls._from_table(tab, n - 1)


# ---------------------------------------------------------------------------
# forward transform


def _check_path_in_grid(f, points):
    if isinstance(f, SymmetricTensorField):
        inside = f.grid.contains(points)
        if not np.all(inside):
            raise OutOfDomainError("geodesic leaves the grid box of the field")


def forward_single(f, path: GeodesicPath, allow_partial: bool = False) -> float:
    """I_m f along one geodesic: trapezoid rule over the integrator samples."""
    if not path.exited and not allow_partial:
        raise NoExitError("geodesic did not exit; pass allow_partial=True to integrate anyway")
    if len(path) < 2:
        return 0.0
    _check_path_in_grid(f, path.points)
    vals = np.atleast_1d(contract_with_velocity(f, path.points, path.velocities))
    return float(np.trapezoid(vals, path.t))


def bundle_integrals(f, bundle: RayBundle) -> np.ndarray:
    """Trapezoid integrals of <f, v^m> for every ray of a bundle (vectorized)."""
    if len(bundle.t) == 0:
        return np.zeros(len(bundle))
    _check_path_in_grid(f, bundle.points)
    sel = f.support_mask(bundle.points) if hasattr(f, "support_mask") else np.ones(len(bundle.t), bool)
    vals = _contract_chunked(f, bundle, sel)
    w = bundle.trapezoid_weights()
    return np.bincount(bundle.ray_index, weights=w * vals, minlength=len(bundle))


@dataclass
class FanTrace:
    """Traced chords of a fan, reusable across fields."""

    fan: GeodesicFan
    bundle: RayBundle
    index: np.ndarray  # fan entry of each traced ray
    status: np.ndarray  # per fan entry
    velocities: np.ndarray


def trace_fan(fan: GeodesicFan, metric: ChartMetric, boundary: BoundaryChart, step: float = 1e-2,
              tmax: float = 10.0, grid: Optional[Grid] = None, check_local: bool = True) -> FanTrace:
    """Trace complete chords through the admissible fan entries."""
    R = len(fan)
    status = np.where(fan.admissible, OK, INADMISSIBLE).astype(np.int8)
    vel = np.full((R, metric.dim), np.nan)
    idx = np.flatnonzero(fan.admissible)
    sub = fan.subset(idx)
    if len(idx):
        vel[idx] = sub.velocities(metric, boundary)
        bundle = trace_chords(metric, boundary, sub.points, vel[idx], step, tmax)
        status[idx] = np.where(bundle.status == 2, BLOW_UP, np.where(bundle.status == 1, NO_EXIT, OK))
        rid = bundle.ray_index
        if grid is not None:
            out = ~grid.contains(bundle.points)
            bad = np.unique(rid[out])
            status[idx[bad]] = np.where(status[idx[bad]] == OK, OUT_OF_GRID, status[idx[bad]])
        if check_local:
            xs = boundary.x(bundle.points)
            bad = np.unique(rid[xs < -1e-9])
            status[idx[bad]] = np.where(status[idx[bad]] == OK, NON_LOCAL, status[idx[bad]])
    else:
        n = metric.dim
        bundle = RayBundle(np.zeros((0, n)), np.zeros((0, n)), np.zeros(0), np.zeros(1, np.int64),
                           np.zeros(0, bool), np.zeros(0, np.int8))
    return FanTrace(fan, bundle, idx, status, vel)


def forward_fan(f, fan: GeodesicFan, metric: ChartMetric, boundary: BoundaryChart,
                step: float = 1e-2, tmax: float = 10.0, trace: Optional[FanTrace] = None,
                allow_partial: bool = False) -> RayData:
    """Ray transform of ``f`` over every fan entry, in fan order.

    Per-entry failures are recorded in ``status``/``errors`` and never abort the fan.
    Rays leaving x >= 0 are flagged ``non_local`` but still evaluated.
    """
    grid = f.grid if isinstance(f, SymmetricTensorField) else None
    if trace is None:
        trace = trace_fan(fan, metric, boundary, step, tmax, grid)
    R = len(fan)
    values = np.full(R, np.nan)
    lengths = np.full(R, np.nan)
    status = trace.status.copy()
    errors = []
    b = trace.bundle
    if len(trace.index):
        lengths[trace.index] = b.lengths
        integ = _safe_bundle_integrals(f, b, grid)
        good_status = (OK, NON_LOCAL, NO_EXIT) if allow_partial else (OK, NON_LOCAL)
        ok = np.isin(status[trace.index], good_status)
        values[trace.index[ok]] = integ[ok]
    for i in np.flatnonzero(~np.isin(status, (OK, NON_LOCAL))):
        errors.append((int(i), STATUS_NAMES[int(status[i])]))
    return RayData(fan.x, fan.y, fan.lam, fan.omega, values, lengths, fan.admissible, status,
                   points=fan.points, velocities=trace.velocities, errors=errors)


def _safe_bundle_integrals(f, bundle, grid):
    if grid is None:
        return bundle_integrals(f, bundle)
    vals = _contract_chunked(f, bundle, grid.contains(bundle.points))
    w = bundle.trapezoid_weights()
    return np.bincount(bundle.ray_index, weights=w * vals, minlength=len(bundle))


def _contract_chunked(f, bundle, sel, chunk: int = 100_000):
    """<f, v^m> at the selected samples (zero elsewhere), in bounded-memory chunks."""
    vals = np.zeros(len(bundle.t))
    idx = np.flatnonzero(sel)
    for s in range(0, len(idx), chunk):
        i = idx[s:s + chunk]
        vals[i] = np.atleast_1d(contract_with_velocity(f, bundle.points[i], bundle.velocities[i]))
    return vals


def forward_matrix(grid: Grid, rank: int, bundle: RayBundle, chunk: int = 500,
                   node_subset: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """Sparse matrix A with (A f)_i = trapezoid integral of <f, v^m> along ray i.

    Columns follow the flattened field layout node * C + component.  With
    ``node_subset`` only those nodes get columns (in the given order); stencil
    weights on other nodes are dropped, i.e. the field is taken to vanish there.
    """
    n = grid.dim
    C = mi.n_components(n, rank)
    mult = mi.multiplicities(n, rank)
    if node_subset is not None:
        col_of = np.full(grid.n_nodes, -1, np.int64)
        col_of[np.asarray(node_subset)] = np.arange(len(node_subset))
        ncols = len(node_subset) * C
    else:
        col_of = np.arange(grid.n_nodes, dtype=np.int64)
        ncols = grid.n_nodes * C
    w_all = bundle.trapezoid_weights()
    rid_all = bundle.ray_index
    blocks = []
    R = len(bundle)
    for start in range(0, R, chunk):
        stop = min(R, start + chunk)
        s = slice(bundle.offsets[start], bundle.offsets[stop])
        pts = bundle.points[s]
        nodes, wts = grid.stencil(pts)
        coef = mult * mi.monomials(bundle.velocities[s], rank)  # (P, C)
        q = (w_all[s][:, None] * wts)  # (P, 8)
        cols_node = col_of[nodes]  # (P, 8)
        keep = cols_node >= 0
        rows = np.broadcast_to((rid_all[s] - start)[:, None, None], keep.shape + (C,))
        cols = cols_node[:, :, None] * C + np.arange(C)[None, None, :]
        vals = q[:, :, None] * coef[:, None, :]
        k3 = np.broadcast_to(keep[:, :, None], vals.shape)
        blk = sp.coo_matrix((vals[k3], (rows[k3], cols[k3])), shape=(stop - start, ncols)).tocsr()
        blk.sum_duplicates()
        blocks.append(blk)
    if not blocks:
        return sp.csr_matrix((0, ncols))
    return sp.vstack(blocks, format="csr")


# ---------------------------------------------------------------------------
# elastic qP travel-time perturbation


def qp_perturbation(a, rho, cP, path: GeodesicPath, allow_partial: bool = False) -> float:
    """Integral of a_ijkl / (rho cP^6) v^i v^j v^k v^l along the path.

    ``a`` is a constant tensor (n, n, n, n) or a callable points -> (P, n, n, n, n);
    ``rho`` and ``cP`` are scalars or callables points -> (P,).
    """
    if not path.exited and not allow_partial:
        raise NoExitError("geodesic did not exit; pass allow_partial=True to integrate anyway")
    p, v = path.points, path.velocities
    A = a(p) if callable(a) else np.broadcast_to(np.asarray(a, float), (len(p),) + np.shape(a))
    check_stiffness(A)
    r = rho(p) if callable(rho) else np.full(len(p), float(rho))
    c = cP(p) if callable(cP) else np.full(len(p), float(cP))
    if np.any(r <= 0) or np.any(c <= 0):
        raise ValidationError("density and speed must be positive")
    vals = np.einsum("pijkl,pi,pj,pk,pl->p", A, v, v, v, v) / (r * c**6)
    return float(np.trapezoid(vals, path.t))


def constant_field(comps, rank: int, dim: int) -> PolynomialTensorField:
    return PolynomialTensorField({(0,) * dim: comps}, rank, dim)


def qp_as_field(a, rho: float, cP: float) -> PolynomialTensorField:
    """Constant rank-4 field Sym(a / (rho cP^6)) for a constant stiffness perturbation."""
    a = np.asarray(a, float)
    return constant_field(stiffness_to_symmetric(a, rho, cP), 4, a.shape[-1])


# ---------------------------------------------------------------------------
# backprojection L


def sphere_area(k: int) -> float:
    """Round measure of the unit sphere S^k (k = 0 gives 2 points)."""
    return 2 * pi ** ((k + 1) / 2) / gamma((k + 1) / 2)


def weighted_transform_L(data: RayData, cutoff: Optional[CutoffProfile], grid: Grid,
                         F: float = 0.0, frame: str = "sc", rank: int = 4,
                         required=None, tol: float = 1e-8) -> SymmetricTensorField:
    """Backprojection L u(x, y) = x^4 sum chi(lam/x) u xi^{(x)m} dlam domega.

    Each fan base point must coincide with a grid node.  In the ``sc`` frame xi has
    scattering-frame components (omega, lam/x) with the x direction last, which is
    the g_sc-lowered direction times x; the x^4 factor cancels the x^{-4} of the
    fourth power.  ``frame="euclidean"`` instead uses the unit chart velocity of the
    ray with chi only (no x weights); it is the exact flat adjoint companion of I.

    Quadrature: uniform dlam spacing per base point and round-measure domega.
    ``F`` multiplies the result by exp(-F/x).  Nodes listed in ``required`` without
    any valid entry raise CoverageError.
    """
    if frame not in ("sc", "euclidean"):
        raise ValidationError("frame must be 'sc' or 'euclidean'")
    n = grid.dim
    if data.dim != n:
        raise ValidationError("ray data and grid dimensions differ")
    cutoff = CutoffProfile("constant") if cutoff is None else cutoff
    C = mi.n_components(n, rank)
    out = np.zeros((grid.n_nodes, C))
    if data.points is None:
        raise ValidationError("ray data carries no base points")
    base = np.asarray(data.points, float)
    node, exact = _match_nodes(grid, base, tol)
    if not np.all(exact):
        raise ValidationError("fan base points must lie on grid nodes")
    valid = data.valid
    if required is not None:
        req = np.unique(np.asarray(required, np.int64))
        have = np.zeros(grid.n_nodes, bool)
        have[node[valid]] = True
        starved = req[~have[req]]
        if len(starved):
            raise CoverageError(f"{len(starved)} output nodes have no valid fan entries",
                                starved=starved.tolist())
    wlam = np.ones(len(data))
    for nd in np.unique(node):
        sel = node == nd
        lams = np.unique(data.lam[sel])
        if len(lams) > 1:
            wlam[sel] = (lams[-1] - lams[0]) / (len(lams) - 1)
    n_om = _omega_counts(node, data.lam)
    womega = sphere_area(n - 2) / n_om
    x = data.x
    zero_weight = []
    if frame == "sc":
        pos = (x > 0) & valid
        s = np.zeros(len(data))
        s[pos] = data.lam[pos] / x[pos]
        chi = np.where(pos, cutoff(s), 0.0)
        xi = np.column_stack([data.omega, s])
        cap = cutoff(max(abs(s[pos]).max(), 0) if pos.any() else 0.0)
        if pos.any() and cutoff.kind == "gaussian" and cap > 1e-3:
            warnings.warn("fan lambda range truncates the gaussian cutoff", CoverageWarning,
                          stacklevel=2)
    else:
        chi = np.where(valid, 1.0, 0.0)
        if cutoff.kind != "constant":
            pos = (x > 0) & valid
            chi[pos] *= cutoff(data.lam[pos] / x[pos])
        xi = data.velocities
    w = chi * wlam * womega
    w = np.where(valid, w, 0.0)
    u = np.where(valid, data.values, 0.0)
    contrib = (w * u)[:, None] * mi.monomials(np.nan_to_num(xi), rank)
    np.add.at(out, node, contrib)
    if F != 0:
        xn = np.zeros(grid.n_nodes)
        xn[node] = x
        fac = np.zeros(grid.n_nodes)
        posn = xn > 0
        fac[posn] = np.exp(-F / xn[posn])
        out *= fac[:, None]
    for nd in np.unique(node[valid]):
        if not np.any(w[node == nd] > 0):
            zero_weight.append(int(nd))
    if zero_weight:
        warnings.warn(f"cutoff support misses the fan at {len(zero_weight)} nodes; output is zero there",
                      CoverageWarning, stacklevel=2)
    return SymmetricTensorField(grid, rank, out)


def _match_nodes(grid: Grid, points, tol):
    s = (points - np.array(grid.lower)) / grid.spacing
    i = np.rint(s).astype(np.int64)
    exact = np.all(np.abs(s - i) <= tol, axis=1) & np.all((i >= 0) & (i < np.array(grid.shape)), axis=1)
    i = np.clip(i, 0, np.array(grid.shape) - 1)
    strides = np.array([int(np.prod(grid.shape[k + 1:])) for k in range(grid.dim)], dtype=np.int64)
    return i @ strides, exact


def _omega_counts(node, lam):
    """Number of fan directions sharing each entry's (node, lambda)."""
    key = np.stack([node.astype(float), lam], axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return counts[inv.reshape(-1)].astype(float)
