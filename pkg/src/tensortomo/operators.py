"""Sparse discrete operators between flattened canonical tensor grids.

Flattening: index = node * C + component, nodes in grid C order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import _multiindex as mi
from .errors import IllConditionedError, RankOverflowError, ValidationError, WeightSingularityError
from .grid import Grid


@dataclass
class DiscreteOperator:
    """Sparse map with diagonal inner-product weights on both sides.

    ``adjoint()`` returns ``W_in^{-1} A^T W_out`` so that
    ``<A u, w>_{W_out} = <u, A* w>_{W_in}`` holds to round-off.
    """

    matrix: sp.spmatrix
    w_in: Optional[np.ndarray] = None
    w_out: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        r, c = self.matrix.shape
        self.w_in = np.ones(c) if self.w_in is None else np.asarray(self.w_in, float)
        self.w_out = np.ones(r) if self.w_out is None else np.asarray(self.w_out, float)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, u):
        return self.matrix @ u

    def adjoint(self) -> "DiscreteOperator":
        M = sp.diags(1.0 / self.w_in) @ self.matrix.T @ sp.diags(self.w_out)
        return DiscreteOperator(M, self.w_out, self.w_in, name=f"{self.name}*")

    def adjoint_residual(self, rng, trials: int = 1) -> float:
        """max |<Au, w> - <u, A*w>| / (|u| |w|) over random pairs (weighted norms)."""
        adj = self.adjoint()
        worst = 0.0
        for _ in range(trials):
            u = rng.standard_normal(self.shape[1])
            w = rng.standard_normal(self.shape[0])
            lhs = np.dot(self.w_out * (self @ u), w)
            rhs = np.dot(self.w_in * u, adj @ w)
            nu = np.sqrt(np.dot(self.w_in * u, u))
            nw = np.sqrt(np.dot(self.w_out * w, w))
            worst = max(worst, abs(lhs - rhs) / (nu * nw))
        return worst


def _coo_parts(M):
    M = M.tocoo()
    return M.row.astype(np.int64), M.col.astype(np.int64), M.data


def sym_diff_matrix(grid: Grid, m: int, metric=None) -> sp.csr_matrix:
    """Matrix of the discrete d^s from rank m to rank m+1 on the whole grid."""
    if m >= 4:
        raise RankOverflowError("sym_diff is defined for rank <= 3 inputs")
    n = grid.dim
    N = grid.n_nodes
    cin = mi.n_components(n, m)
    cout = mi.n_components(n, m + 1)
    dk = [_coo_parts(grid.diff_matrix(k)) for k in range(n)]
    rows, cols, data = [], [], []
    scale = 1.0 / (m + 1)
    for b, k, a in mi.symdiff_table(n, m):
        r, c, d = dk[k]
        rows.append(r * cout + b)
        cols.append(c * cin + a)
        data.append(d * scale)
    if metric is not None and metric.provenance != "euclidean" and m > 0:
        gam = metric.christoffel(grid.nodes)
        acc = {}
        conn = {}
        for a, k, ar, q, a2 in mi.connection_table(n, m):
            conn.setdefault((a, k), []).append((ar, q, a2))
        for b, k, a in mi.symdiff_table(n, m):
            for ar, q, a2 in conn.get((a, k), ()):
                key = (b, a2)
                acc[key] = acc.get(key, 0.0) - scale * gam[:, q, k, ar]
        nodes = np.arange(N, dtype=np.int64)
        for (b, a2), coef in acc.items():
            rows.append(nodes * cout + b)
            cols.append(nodes * cin + a2)
            data.append(coef)
    M = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N * cout, N * cin))
    return M.tocsr()


def field_weights(grid: Grid, m: int, volume=None) -> np.ndarray:
    """Diagonal weights volume(node) * multiplicity(component), flattened."""
    vol = grid.volume_weights if volume is None else np.asarray(volume, float)
    return np.outer(vol, mi.multiplicities(grid.dim, m)).ravel()


def divergence_matrix(grid: Grid, m: int, metric=None, volume=None) -> sp.csr_matrix:
    """delta^s from rank m+1 to rank m as W_m^{-1} D^T W_{m+1}."""
    D = sym_diff_matrix(grid, m, metric)
    op = DiscreteOperator(D, field_weights(grid, m, volume), field_weights(grid, m + 1, volume))
    return op.adjoint().matrix


def _expand(mask_nodes: np.ndarray, C: int) -> np.ndarray:
    """Flat component indices of the given node indices."""
    return (mask_nodes[:, None] * C + np.arange(C)[None, :]).ravel()


class ConjugatedSymDiff:
    """d^s_F = e^{-F/x} d^s e^{F/x} restricted to active node sets.

    Parameters
    ----------
    grid, m : grid and input rank (output rank m+1).
    F : weight parameter (F = 0 gives the plain operator).
    x : node values of the boundary coordinate.
    active : boolean node mask of the output set U (rank m+1 fields live here).
    inner : boolean node mask of the input set V (rank m unknowns); defaults to
        ``active`` minus its face layer (Dirichlet condition on v).
    volume : "sc" for trapezoid * x^{-n-1}, "plain" for trapezoid weights.
    fiber : "euclidean" weights components by multiplicity only; "sc" also by
        x^{2(2a+b)} (a factors along ``x_axis``, b others), the norm in the frame
        dx/x^2, dy/x.  Only meaningful when x is the ``x_axis`` coordinate.
    """

    def __init__(self, grid: Grid, m: int, F: float, x, metric=None, active=None, inner=None,
                 volume: str = "sc", fiber: str = "euclidean", x_axis: int = -1):
        self.grid = grid
        self.m = m
        self.F = float(F)
        n = grid.dim
        x = np.asarray(x, float).reshape(-1)
        if x.shape != (grid.n_nodes,):
            raise ValidationError("x must hold one value per grid node")
        if active is None:
            active = np.ones(grid.n_nodes, bool)
        active = np.asarray(active, bool)
        if inner is None:
            inner = interior_of(grid, active)
        inner = np.asarray(inner, bool) & active
        used = active | inner
        if np.any(x[used] <= 0) and (self.F != 0 or volume == "sc"):
            raise WeightSingularityError("x must be positive on the active nodes")
        self.x = x
        self.active = active
        self.inner = inner
        self.u_nodes = np.flatnonzero(active)
        self.v_nodes = np.flatnonzero(inner)
        self.cin = mi.n_components(n, m)
        self.cout = mi.n_components(n, m + 1)
        rows_idx = _expand(self.u_nodes, self.cout)
        cols_idx = _expand(self.v_nodes, self.cin)
        D = sym_diff_matrix(grid, m, metric)[rows_idx][:, cols_idx].tocoo()
        if self.F != 0:
            xi = x[self.u_nodes][D.row // self.cout]
            xj = x[self.v_nodes][D.col // self.cin]
            D.data = D.data * np.exp(self.F / xj - self.F / xi)
        self.D = D.tocsr()
        if volume == "sc":
            vol = grid.volume_weights * np.where(used, x, 1.0) ** (-(n + 1))
        elif volume == "plain":
            vol = grid.volume_weights
        else:
            raise ValidationError("volume must be 'sc' or 'plain'")
        self.volume = vol
        self.fiber = fiber
        self.w_out = (np.outer(vol[self.u_nodes], mi.multiplicities(n, m + 1))
                      * _fiber_weights(x[self.u_nodes], n, m + 1, fiber, x_axis)).ravel()
        self.w_in = (np.outer(vol[self.v_nodes], mi.multiplicities(n, m))
                     * _fiber_weights(x[self.v_nodes], n, m, fiber, x_axis)).ravel()

    @property
    def operator(self) -> DiscreteOperator:
        return DiscreteOperator(self.D, self.w_in, self.w_out, name="d^s_F")

    def adjoint_matrix(self) -> sp.csr_matrix:
        return self.operator.adjoint().matrix

    def exp_weight(self, nodes: np.ndarray, C: int, sign: float = 1.0) -> np.ndarray:
        """e^{sign F/x} per flat component of the given nodes."""
        if self.F == 0:
            return np.ones(len(nodes) * C)
        return np.repeat(np.exp(sign * self.F / self.x[nodes]), C)

    def gather_u(self, comps: np.ndarray) -> np.ndarray:
        return np.asarray(comps).reshape(self.grid.n_nodes, -1)[self.u_nodes].ravel()

    def gather_v(self, comps: np.ndarray) -> np.ndarray:
        return np.asarray(comps).reshape(self.grid.n_nodes, -1)[self.v_nodes].ravel()

    def scatter_u(self, vec) -> np.ndarray:
        out = np.zeros((self.grid.n_nodes, self.cout), dtype=np.result_type(vec, float))
        out[self.u_nodes] = np.asarray(vec).reshape(-1, self.cout)
        return out

    def scatter_v(self, vec) -> np.ndarray:
        out = np.zeros((self.grid.n_nodes, self.cin), dtype=np.result_type(vec, float))
        out[self.v_nodes] = np.asarray(vec).reshape(-1, self.cin)
        return out

    def laplacian(self) -> sp.csr_matrix:
        """Stiffness matrix K = D^T W_out D, so that Delta = W_in^{-1} K."""
        return (self.D.T @ sp.diags(self.w_out) @ self.D).tocsr()


def _fiber_weights(x, n, m, fiber, x_axis):
    if fiber == "euclidean":
        return np.ones((len(x), mi.n_components(n, m)))
    if fiber != "sc":
        raise ValidationError("fiber must be 'euclidean' or 'sc'")
    ax = x_axis % n
    a = np.array([sum(1 for i in idx if i == ax) for idx in mi.canonical_indices(n, m)])
    return np.abs(x)[:, None] ** (2 * (2 * a + (m - a)))[None, :]


def interior_of(grid: Grid, mask: np.ndarray) -> np.ndarray:
    """Nodes of ``mask`` whose axis neighbours are all in ``mask`` and off the grid face."""
    m = np.asarray(mask, bool).reshape(grid.shape)
    out = m.copy()
    for k in range(grid.dim):
        sl_lo = [slice(None)] * grid.dim
        sl_hi = [slice(None)] * grid.dim
        shifted_lo = np.zeros_like(m)
        shifted_hi = np.zeros_like(m)
        sl_lo[k] = slice(1, None)
        sl_hi[k] = slice(None, -1)
        shifted_lo[tuple(sl_lo)] = m[tuple(sl_hi)]
        shifted_hi[tuple(sl_hi)] = m[tuple(sl_lo)]
        out &= shifted_lo & shifted_hi
    return out.ravel()


# ---------------------------------------------------------------------------
# preconditioned conjugate gradients with Lanczos Ritz estimates


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residuals: list = field(default_factory=list)
    ritz_min: float = np.nan
    ritz_max: float = np.nan


def block_jacobi(K: sp.csr_matrix, block: int):
    """Inverse of the block-diagonal part of K with square blocks of size ``block``."""
    nb = K.shape[0] // block
    Kc = K.tocsr()
    blocks = np.zeros((nb, block, block))
    coo = Kc.tocoo()
    same = (coo.row // block) == (coo.col // block)
    r, c, d = coo.row[same], coo.col[same], coo.data[same]
    np.add.at(blocks, (r // block, r % block, c % block), d)
    inv = np.linalg.inv(blocks)

    def apply(v):
        return np.einsum("bij,bj->bi", inv, v.reshape(nb, block)).ravel()

    return apply


def pcg(K, b, precond=None, rtol: float = 1e-12, maxiter: int = 20000, x0=None,
        raise_on_stall: bool = True) -> CGResult:
    """Preconditioned CG for SPD K; records Lanczos coefficients for Ritz bounds.

    The Ritz values are those of the preconditioned operator.
    """
    n = len(b)
    x = np.zeros(n) if x0 is None else np.array(x0, float)
    r = b - K @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return CGResult(np.zeros(n), True, 0, [0.0])
    z = precond(r) if precond is not None else r.copy()
    p = z.copy()
    rz = r @ z
    alphas, betas, res = [], [], [np.linalg.norm(r) / bnorm]
    converged = res[-1] <= rtol
    it = 0
    best = np.inf
    stall = 0
    while not converged and it < maxiter:
        Kp = K @ p
        pKp = p @ Kp
        if pKp <= 0:
            break
        alpha = rz / pKp
        x += alpha * p
        r -= alpha * Kp
        it += 1
        if it % 50 == 0:
            r = b - K @ x
        z = precond(r) if precond is not None else r.copy()
        rz_new = r @ z
        beta = rz_new / rz
        alphas.append(alpha)
        betas.append(beta)
        rz = rz_new
        p = z + beta * p
        res.append(np.linalg.norm(r) / bnorm)
        converged = res[-1] <= rtol
        if res[-1] < 0.5 * best:
            best = res[-1]
            stall = 0
        else:
            stall += 1
        if stall > 2000:
            break
    rtrue = np.linalg.norm(b - K @ x) / bnorm
    res.append(rtrue)
    converged = rtrue <= max(rtol, 10 * rtol)
    rmin, rmax = _ritz(alphas, betas)
    out = CGResult(x, converged, it, res, rmin, rmax)
    if not converged and raise_on_stall:
        raise IllConditionedError(
            f"CG stalled at relative residual {rtrue:.3e} after {it} iterations; "
            f"smallest Ritz value estimate {rmin:.3e}", ritz_min=rmin)
    return out


def _ritz(alphas, betas):
    k = len(alphas)
    if k == 0:
        return np.nan, np.nan
    a = np.array(alphas)
    b = np.array(betas)
    diag = 1.0 / a
    diag[1:] += b[:-1] / a[:-1]
    off = np.sqrt(np.abs(b[:-1])) / a[:-1]
    T = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    ev = np.linalg.eigvalsh(T)
    return float(ev[0]), float(ev[-1])
