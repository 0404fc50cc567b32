"""Solenoidal gauge, Witten Laplacian solves, face extension and local inversion."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _multiindex as mi
from ._validation import check_scalar
from .errors import FoliationError, NullSpaceWarning, ValidationError
from .geometry import convexity_probe
from .grid import Grid
from .operators import ConjugatedSymDiff, block_jacobi, pcg
from .tensors import SymmetricTensorField
from .transform import OK, forward_matrix, trace_fan


# ---------------------------------------------------------------------------
# Witten Laplacian and the solenoidal projector


class WittenLaplacian:
    """Delta_{F,s} = delta^s_F d^s_F on rank-3 fields with Dirichlet data on the mask face.

    ``mask`` is the active node set U where rank-4 fields live; rank-3 unknowns
    live on its interior V.  The discrete operator is W_V^{-1} K with
    K = D^T W_U D, D the conjugated symmetric differential.
    """

    def __init__(self, grid: Grid, F: float, x, mask=None, metric=None, volume: str = "sc",
                 inner=None, fiber: str = "euclidean", x_axis: int = -1):
        self.grid = grid
        self.F = float(F)
        self.cd = ConjugatedSymDiff(grid, 3, F, x, metric=metric, active=mask, inner=inner, volume=volume,
                                    fiber=fiber, x_axis=x_axis)
        self.K = self.cd.laplacian()
        self._prec = None

    @property
    def mask(self):
        return self.cd.active

    @property
    def interior(self):
        return self.cd.inner

    def precond(self):
        if self._prec is None:
            self._prec = block_jacobi(self.K, self.cd.cin)
        return self._prec

    # flat helpers on the reduced vectors --------------------------------------
    def ds(self, v):
        return self.cd.D @ v

    def deltas(self, f):
        return (self.cd.D.T @ (self.cd.w_out * f)) / self.cd.w_in

    def apply(self, v):
        return (self.K @ v) / self.cd.w_in

    def solve_reduced(self, rhs, rtol: float = 1e-10, maxiter: int = 20000):
        """v with Delta v = rhs on V (flat vectors over V)."""
        b = self.cd.w_in * rhs
        return pcg(self.K, b, self.precond(), rtol=rtol, maxiter=maxiter)

    def project_reduced(self, f, rtol: float = 1e-10):
        """(u, v, cg) with u = f - d v and v = Delta^{-1} delta f, flat over U and V."""
        b = self.cd.D.T @ (self.cd.w_out * f)
        res = pcg(self.K, b, self.precond(), rtol=rtol)
        u = f - self.cd.D @ res.x
        return u, res.x, res

    def gauge_norm(self, f) -> float:
        """||delta^s_F f|| in the weighted norm on V."""
        d = self.deltas(f)
        return float(np.sqrt(np.sum(self.cd.w_in * d**2)))

    def norm_u(self, f) -> float:
        return float(np.sqrt(np.sum(self.cd.w_out * f**2)))

    def norm_v(self, v) -> float:
        return float(np.sqrt(np.sum(self.cd.w_in * v**2)))

    def coercivity(self) -> float:
        """Smallest eigenvalue of K w = kappa W_V w, i.e. inf <Delta w, w> / ||w||^2."""
        n = self.K.shape[0]
        Wm = sp.diags(self.cd.w_in)
        if n <= 1500:
            from scipy.linalg import eigh
            return float(eigh(self.K.toarray(), np.diag(self.cd.w_in), eigvals_only=True,
                              subset_by_index=[0, 0])[0])
        val = spla.eigsh(self.K.tocsc(), k=1, M=Wm.tocsc(), sigma=0, which="LM",
                         return_eigenvectors=False)
        return float(val[0])


def solve_witten_laplacian(rhs: SymmetricTensorField, F: float, x, mask=None, metric=None,
                           rtol: float = 1e-10, volume: str = "sc") -> SymmetricTensorField:
    """Solve Delta_{F,s} v = rhs with v = 0 off the interior of ``mask``.

    ``rhs`` is read on the interior nodes only.  Raises IllConditionedError when
    CG stagnates.
    """
    if rhs.rank != 3:
        raise ValidationError("rhs must be a rank-3 field")
    lap = WittenLaplacian(rhs.grid, F, x, mask, metric, volume)
    res = lap.solve_reduced(lap.cd.gather_v(rhs.comps), rtol)
    return SymmetricTensorField(rhs.grid, 3, lap.cd.scatter_v(res.x))


@dataclass
class SolenoidalDecomposition:
    """f = u + d^s_F v on the active nodes, with delta^s_F u = 0."""

    u: SymmetricTensorField
    v: SymmetricTensorField
    residual_gauge: float
    iterations: int = 0
    f_norm: float = 0.0

    def potential(self, F, x, mask=None, metric=None) -> SymmetricTensorField:
        cd = ConjugatedSymDiff(self.u.grid, 3, F, x, metric, active=mask)
        return SymmetricTensorField(self.u.grid, 4, cd.scatter_u(cd.D @ cd.gather_v(self.v.comps)))


def solenoidal_project(f: SymmetricTensorField, F: float, x, mask=None, metric=None,
                       rtol: float = 1e-10, lap: Optional[WittenLaplacian] = None,
                       volume: str = "sc") -> SolenoidalDecomposition:
    """S_F f = f - d^s_F Delta^{-1} delta^s_F f on the active nodes (zero elsewhere)."""
    if f.rank != 4:
        raise ValidationError("solenoidal_project expects a rank-4 field")
    lap = lap or WittenLaplacian(f.grid, F, x, mask, metric, volume)
    fr = lap.cd.gather_u(f.comps)
    u, v, res = lap.project_reduced(fr, rtol)
    fn = lap.norm_u(fr)
    return SolenoidalDecomposition(SymmetricTensorField(f.grid, 4, lap.cd.scatter_u(u)),
                                   SymmetricTensorField(f.grid, 3, lap.cd.scatter_v(v)),
                                   lap.gauge_norm(u), res.iterations, fn)


def coercivity_probe(grid: Grid, x=None, F_values: Sequence[float] = (2.0, 4.0, 8.0), mask=None,
                     metric=None, volume: str = "sc", fiber: str = "sc", x_axis: int = -1) -> dict:
    """Discrete coercivity constants kappa(F) and the log-log growth exponent.

    kappa(F) = inf <Delta_{F,s} w, w> / ||w||^2 over Dirichlet w.  With the default
    ``fiber="sc"`` the norms are taken in the frame dx/x^2, dy/x with x the
    ``x_axis`` coordinate (the default when ``x`` is None).
    """
    x = grid.nodes[:, x_axis] if x is None else x
    kap = np.array([WittenLaplacian(grid, F, x, mask, metric, volume, fiber=fiber, x_axis=x_axis).coercivity()
                    for F in F_values])
    Fv = np.asarray(F_values, float)
    slope = float(np.polyfit(np.log(Fv), np.log(np.maximum(kap, 1e-300)), 1)[0]) if np.all(kap > 0) else -np.inf
    return {"F": Fv, "kappa": kap, "exponent": slope, "positive": bool(np.all(kap > 0)),
            "monotone": bool(np.all(np.diff(kap) > 0))}


def default_F(domain_scale: float) -> float:
    """Weight parameter 4 / domain scale."""
    check_scalar(domain_scale, "domain_scale", lower=0, lower_inclusive=False)
    return 4.0 / domain_scale


# ---------------------------------------------------------------------------
# extension across a face


@dataclass(frozen=True)
class ExtensionCoefficients:
    """C_1..C_5 with sum_q C_q q^k = (-1)^k for k = 0..4."""

    exact: tuple

    @property
    def C(self) -> np.ndarray:
        return np.array([float(c) for c in self.exact])

    def residuals(self) -> np.ndarray:
        q = np.arange(1, 6, dtype=float)
        return np.array([np.sum(self.C * q**k) - (-1) ** k for k in range(5)])


def vandermonde_extension_coeffs() -> ExtensionCoefficients:
    """Exact rational solve of the 5x5 Vandermonde system by Gaussian elimination."""
    A = [[Fraction(q) ** k for q in range(1, 6)] + [Fraction((-1) ** k)] for k in range(5)]
    n = 5
    for col in range(n):
        piv = next(r for r in range(col, n) if A[r][col] != 0)
        A[col], A[piv] = A[piv], A[col]
        for r in range(n):
            if r != col and A[r][col] != 0:
                fac = A[r][col] / A[col][col]
                A[r] = [a - fac * b for a, b in zip(A[r], A[col])]
    return ExtensionCoefficients(tuple(A[i][n] / A[i][i] for i in range(n)))


def _parity_counts(dim, rank, axis):
    return np.array([sum(1 for i in idx if i == axis) for idx in mi.canonical_indices(dim, rank)])


def extend_tensor_field(f: SymmetricTensorField, depth: Optional[int] = None, axis: int = -1,
                        coeffs: Optional[ExtensionCoefficients] = None) -> SymmetricTensorField:
    """Extend a field given on x_n >= 0 (grid starting at x_n = 0) across the face.

    Values at x_n = -k h are sum_q C_q (-q)^{p} f(x', q k h) with p the number of
    n-indices of the component; ``depth`` (in nodes, default the largest possible)
    must satisfy 5 * depth <= nodes - 1 along the axis.
    """
    g = f.grid
    ax = axis % g.dim
    if abs(g.lower[ax]) > 1e-12 * max(1.0, abs(g.upper[ax])):
        raise ValidationError("the half grid must start at x_n = 0")
    N = g.shape[ax]
    depth = (N - 1) // 5 if depth is None else int(depth)
    if depth < 1 or 5 * depth > N - 1:
        raise ValidationError(f"depth must be in [1, {(N - 1) // 5}]")
    C = (coeffs or vandermonde_extension_coeffs()).C
    p = _parity_counts(g.dim, f.rank, ax)
    vals = np.moveaxis(f.comps.reshape(g.shape + (-1,)), ax, 0)  # (N, ..., comps)
    ext = np.zeros((depth,) + vals.shape[1:])
    for k in range(1, depth + 1):
        acc = 0.0
        for q in range(1, 6):
            acc = acc + C[q - 1] * ((-q) ** p) * vals[q * k]
        ext[depth - k] = acc
    full = np.concatenate([ext, vals], axis=0)
    h = g.spacing[ax]
    lower = list(g.lower)
    lower[ax] = -depth * h
    shape = list(g.shape)
    shape[ax] = N + depth
    ng = Grid(tuple(lower), g.upper, tuple(shape))
    comps = np.moveaxis(full, 0, ax).reshape(ng.n_nodes, -1)
    return SymmetricTensorField(ng, f.rank, comps)


def face_mismatch(ext: SymmetricTensorField, axis: int = -1) -> dict:
    """Jumps of value and of one-sided second-order normal derivatives at x_n = 0."""
    g = ext.grid
    ax = axis % g.dim
    h = g.spacing[ax]
    k0 = int(round(-g.lower[ax] / h))
    vals = np.moveaxis(ext.comps.reshape(g.shape + (-1,)), ax, 0)
    right = (-3 * vals[k0] + 4 * vals[k0 + 1] - vals[k0 + 2]) / (2 * h)
    left = (3 * vals[k0] - 4 * vals[k0 - 1] + vals[k0 - 2]) / (2 * h)
    return {"value": 0.0, "derivative": float(np.max(np.abs(right - left))), "h": float(h)}


# ---------------------------------------------------------------------------
# local inversion


@dataclass
class InversionResult:
    u: SymmetricTensorField
    f: SymmetricTensorField
    diagnostics: dict = field(default_factory=dict)


def active_mask(grid: Grid, boundary, x_min: float = 0.0, rho_min: float = 0.0) -> np.ndarray:
    """Nodes with x >= x_min and rho >= rho_min."""
    pts = grid.nodes
    return (boundary.x(pts) >= x_min) & (boundary.rho(pts) >= rho_min)


def cgls(A, b, shift_op=None, maxiter: int = 500, rtol: float = 1e-8, callback=None):
    """CGLS for min ||A z - b||^2 + ||S z||^2, S = ``shift_op`` (sparse or None).

    Returns (z, history) where history holds the data residual ||A z - b|| and the
    full residual of the stacked system per iteration.
    """
    n = A.shape[1]
    z = np.zeros(n)
    r = b.copy()
    rs = np.zeros(shift_op.shape[0]) if shift_op is not None else None
    s = A.T @ r
    p = s.copy()
    gamma = s @ s
    g0 = np.sqrt(gamma)
    data_hist = [float(np.linalg.norm(r))]
    full_hist = [float(np.linalg.norm(r))]
    it = 0
    for it in range(1, maxiter + 1):
        q = A @ p
        qq = q @ q
        if shift_op is not None:
            qs = shift_op @ p
            qq += qs @ qs
        if qq <= 0:
            break
        alpha = gamma / qq
        z += alpha * p
        r -= alpha * q
        if shift_op is not None:
            rs -= alpha * qs
            s = A.T @ r + shift_op.T @ rs
            full = np.sqrt(r @ r + rs @ rs)
        else:
            s = A.T @ r
            full = np.linalg.norm(r)
        gnew = s @ s
        data_hist.append(float(np.linalg.norm(r)))
        full_hist.append(float(full))
        if callback is not None:
            callback(it, z)
        if np.sqrt(gnew) <= rtol * g0:
            break
        p = s + (gnew / gamma) * p
        gamma = gnew
    return z, {"data_residual": data_hist, "full_residual": full_hist, "iterations": it}


def _power_norm(op, n, iters: int = 30, seed: int = 0) -> float:
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        w = op.T @ (op @ v)
        s = np.linalg.norm(w)
        if s == 0:
            return 0.0
        v = w / s
    return float(np.sqrt(s))


def invert_local(data, fan, metric, boundary, grid: Grid, F: float = 1.0, reg: Optional[float] = None,
                 x_min: float = 0.1, rho_min: float = 0.0, step: float = 1e-2, tmax: float = 10.0,
                 trace=None, maxiter: int = 400, rtol: float = 1e-8, mask=None, known=None,
                 weight_data: bool = False, project: bool = True, precondition: bool = False) -> InversionResult:
    """Gauge-penalized least squares for I_4 on the lens, then solenoidal projection.

    Minimizes ||A f - data||^2 + mu ||G f||^2 with G = delta^s_F e^{-F/x} scaled to
    unit norm and mu = 1e-3 ||A||^2 by default (``reg`` is the relative factor).
    ``known`` is an optional rank-4 field whose contribution is subtracted from the
    data; its nodes outside ``mask`` are treated as given.
    """
    n = grid.dim
    x = boundary.x(grid.nodes)
    U = active_mask(grid, boundary, x_min, rho_min) if mask is None else np.asarray(mask, bool)
    if trace is None:
        trace = trace_fan(fan, metric, boundary, step, tmax, grid)
    vals = np.asarray(data.values if hasattr(data, "values") else data, float)
    st = trace.status[trace.index]
    ok = np.isin(st, (OK,)) & np.isfinite(vals[trace.index])
    rays = np.flatnonzero(ok)
    b = vals[trace.index[rays]]
    from .geometry import RayBundle

    bundle = trace.bundle
    sub = _sub_bundle(bundle, rays, RayBundle)
    u_nodes = np.flatnonzero(U)
    A = forward_matrix(grid, 4, sub, node_subset=u_nodes)
    if known is not None:
        others = np.flatnonzero(~U)
        Ak = forward_matrix(grid, 4, sub, node_subset=others)
        b = b - Ak @ known.comps[others].ravel()
    if weight_data:
        ew = np.repeat(np.exp(-F / x[u_nodes]), mi.n_components(n, 4))
        A = A @ sp.diags(ew)
    C4 = mi.n_components(n, 4)
    colnorm = np.sqrt(np.asarray(A.multiply(A).sum(axis=0))).ravel().reshape(-1, C4).max(axis=1)
    starved = u_nodes[colnorm == 0]
    if len(starved):
        warnings.warn(f"{len(starved)} active nodes meet no ray; the solution is unconstrained there: "
                      f"{starved[:20].tolist()}{' ...' if len(starved) > 20 else ''}", NullSpaceWarning)
    lap = WittenLaplacian(grid, F, x, U, metric)
    cd = lap.cd
    einv = cd.exp_weight(cd.u_nodes, cd.cout, -1.0)
    G = sp.diags(1.0 / np.sqrt(cd.w_in)) @ cd.D.T @ sp.diags(cd.w_out * einv)
    gn = _power_norm(G, G.shape[1])
    an = _power_norm(A, A.shape[1]) if A.shape[0] else 0.0
    rel = 1e-3 if reg is None else float(reg)
    mu = rel * an**2
    S = None
    if mu > 0 and gn > 0:
        S = (np.sqrt(mu) / gn) * G
    if A.shape[0] == 0:
        z = np.zeros(A.shape[1])
        hist = {"data_residual": [0.0], "full_residual": [0.0], "iterations": 0}
    else:
        # right Jacobi preconditioning on the stacked columns; the minimizer is unchanged
        cn = np.asarray(A.multiply(A).sum(axis=0)).ravel()
        if S is not None:
            cn = cn + np.asarray(S.multiply(S).sum(axis=0)).ravel()
        cs = sp.diags(1.0 / np.sqrt(np.where(cn > 0, cn, 1.0)) if precondition else np.ones(len(cn)))
        y, hist = cgls((A @ cs).tocsr(), b, (S @ cs).tocsr() if S is not None else None, maxiter, rtol)
        z = cs @ y
    if weight_data:
        z = z * ew
    f = SymmetricTensorField(grid, 4, cd.scatter_u(z))
    if project:
        fF = z * einv
        uF, vF, res = lap.project_reduced(fF)
        u_red = uF / einv
        gauge = lap.gauge_norm(uF) / max(lap.norm_u(uF), 1e-300)
        it_proj = res.iterations
    else:
        u_red, gauge, it_proj = z, lap.gauge_norm(z * einv) / max(lap.norm_u(z * einv), 1e-300), 0
    u = SymmetricTensorField(grid, 4, cd.scatter_u(u_red))
    diag = {"residual": hist["data_residual"][-1], "residual_curve": hist["data_residual"],
            "full_residual_curve": hist["full_residual"], "iterations": hist["iterations"],
            "gauge_norm": gauge, "F": F, "mu": mu, "rays": int(len(rays)), "unknowns": int(A.shape[1]),
            "starved_nodes": starved, "projection_iterations": it_proj, "active": U}
    return InversionResult(u, f, diag)


def _sub_bundle(bundle, rays, RayBundle):
    offs = bundle.offsets
    idx = np.concatenate([np.arange(offs[r], offs[r + 1]) for r in rays]) if len(rays) else np.zeros(0, int)
    counts = offs[rays + 1] - offs[rays]
    new_off = np.concatenate([[0], np.cumsum(counts)])
    return RayBundle(bundle.points[idx], bundle.velocities[idx], bundle.t[idx], new_off,
                     bundle.exited[rays], bundle.status[rays])


def gauge_representative(f: SymmetricTensorField, F: float, x, mask, metric=None) -> SymmetricTensorField:
    """e^{F/x} S_F (e^{-F/x} f): the solenoidal representative of f mod potentials."""
    lap = WittenLaplacian(f.grid, F, x, mask, metric)
    cd = lap.cd
    einv = cd.exp_weight(cd.u_nodes, cd.cout, -1.0)
    uF, _, _ = lap.project_reduced(cd.gather_u(f.comps) * einv)
    return SymmetricTensorField(f.grid, 4, cd.scatter_u(uF / einv))


# ---------------------------------------------------------------------------
# layer stripping


def check_schedule(metric, boundary, taus, samples: int = 24) -> list:
    """Convexity probe at the bottom level x~ = tau - c of every lens in the schedule.

    Geodesics tangent to a level must bend toward larger x~ (sign -1 in the probe).
    Raises FoliationError at the first failing level.
    """
    out = []
    for tau in taus:
        level = tau - boundary.c_offset
        probe = convexity_probe(metric, boundary, level, samples, sign=-1.0)
        out.append((tau, probe))
        if not probe.passed:
            raise FoliationError(f"level x~ = {level:g} (tau = {tau:g}) is not strictly convex "
                                 f"(worst second derivative {-probe.worst:.3e})", level=tau)
    return out


def layer_strip(data_for, fan_for, metric, boundary, grid: Grid, taus: Sequence[float], F: float = 1.0,
                x_min: float = 0.1, overlap: float = 0.1, check_convexity: bool = True, **kw) -> InversionResult:
    """Invert on nested lenses Omega_tau from the boundary inward and stitch.

    ``data_for(tau, fan, trace)`` returns ray data for the fan ``fan_for(tau, chart)``
    on the shifted chart.  Nodes recovered at an earlier level deeper than
    ``overlap`` (in x) are kept fixed; the overlap band is blended linearly.  The
    stitched field is finally projected on the union.
    """
    taus = list(taus)
    if not taus:
        raise ValidationError("empty tau schedule")
    if check_convexity:
        check_schedule(metric, boundary, taus)
    total = np.zeros((grid.n_nodes, mi.n_components(grid.dim, 4)))
    fixed = np.zeros(grid.n_nodes, bool)
    union = np.zeros(grid.n_nodes, bool)
    diags = []
    for tau in taus:
        chart = boundary.shifted(tau)
        fan = fan_for(tau, chart)
        trace = trace_fan(fan, metric, chart, kw.get("step", 1e-2), kw.get("tmax", 10.0), grid)
        data = data_for(tau, fan, trace)
        xs = chart.x(grid.nodes)
        U = active_mask(grid, chart, x_min) & ~fixed
        known = SymmetricTensorField(grid, 4, total * fixed[:, None])
        res = invert_local(data, fan, metric, chart, grid, F, trace=trace, mask=U, known=known,
                           project=False, **{k: v for k, v in kw.items() if k not in ("step", "tmax")})
        new = res.f.comps
        prev = union & ~fixed
        w = np.ones(grid.n_nodes)
        # blend: previously recovered (unfixed) overlap nodes mix old and new by depth in the new chart
        band = prev & U
        if band.any():
            t = np.clip((xs[band] - x_min) / max(overlap, 1e-12), 0, 1)
            w[band] = t
        total = np.where(U[:, None], w[:, None] * new + (1 - w[:, None]) * total, total)
        union |= U
        # nodes deep enough inside this lens become fixed for the next level
        fixed |= U & (xs >= x_min + overlap)
        diags.append(res.diagnostics)
    f = SymmetricTensorField(grid, 4, total)
    # final gauge on the union, using the outermost chart's x
    xo = boundary.shifted(taus[-1]).x(grid.nodes)
    u = gauge_representative(f, F, xo, union, metric)
    return InversionResult(u, f, {"levels": diags, "union": union, "taus": taus})


# ---------------------------------------------------------------------------
# error measures


def lens_frame_components(f: SymmetricTensorField, boundary, nodes=None, sc: bool = True) -> np.ndarray:
    """Components of f in the lens frame (dx, dy) or, with ``sc``, (dx/x^2, dy/x).

    Returns canonical components over the ordered coordinates (x, y_1, ...), so
    index 0 is the x direction.  ``nodes`` selects grid nodes (default all).
    """
    nodes = np.arange(f.grid.n_nodes) if nodes is None else np.asarray(nodes)
    pts = f.grid.nodes[nodes]
    x, y = boundary.to_xy(pts)
    J = boundary.jac_xy(x, y)  # (P, n, n): columns d/dx, d/dy_i in chart coordinates
    full = mi.to_full(f.comps[nodes], f.dim, f.rank)
    for k in range(f.rank):
        full = np.moveaxis(np.einsum("p...i,pij->p...j", np.moveaxis(full, k + 1, -1), J), -1, k + 1)
    comps = mi.from_full(full, f.dim, f.rank)
    if sc:
        a = np.array([idx.count(0) for idx in mi.canonical_indices(f.dim, f.rank)])
        comps = comps * x[:, None] ** (2 * a + (f.rank - a))[None, :]
    return comps


def relative_error(u: SymmetricTensorField, ref: SymmetricTensorField, mask, boundary=None,
                   frame: str = "sc") -> float:
    """Relative L^2 error over the masked nodes, fiber norm in the chosen frame.

    ``frame`` is "chart" (coordinate components of the chart) or "sc" (lens frame
    dx/x^2, dy/x; needs ``boundary``).  Volume weights are the grid trapezoid weights.
    """
    nodes = np.flatnonzero(np.asarray(mask, bool))
    w = u.grid.volume_weights[nodes][:, None] * mi.multiplicities(u.dim, u.rank)[None, :]
    if frame == "chart":
        d, r = u.comps[nodes] - ref.comps[nodes], ref.comps[nodes]
    elif frame == "sc":
        if boundary is None:
            raise ValidationError("the sc frame needs the boundary chart")
        d = lens_frame_components(u - ref, boundary, nodes)
        r = lens_frame_components(ref, boundary, nodes)
    else:
        raise ValidationError("frame must be 'chart' or 'sc'")
    return float(np.sqrt(np.sum(w * d**2) / max(np.sum(w * r**2), 1e-300)))
