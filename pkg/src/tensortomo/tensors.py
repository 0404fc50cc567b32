"""Symmetric tensor fields (rank <= 4) in canonical multi-index storage.

Two kinds of fields share one interface (``rank``, ``dim``, ``evaluate(points)``):

* :class:`SymmetricTensorField` holds node values on a :class:`~tensortomo.grid.Grid`
  and is evaluated off-node by multilinear interpolation.
* :class:`AnalyticTensorField` subclasses are closed-form fields with exact first
  derivatives; :func:`sym_diff` of such a field is evaluated exactly pointwise.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from . import _multiindex as mi
from ._validation import check_points, check_rank
from .errors import (BoundaryContaminationWarning, InvalidStiffnessError, RankMismatchError,
                     RankOverflowError, ValidationError, WeightSingularityError)
from .grid import Grid

canonical_indices = mi.canonical_indices
multiplicities = mi.multiplicities
n_components = mi.n_components


class SymmetricTensorField:
    """Rank-m symmetric tensor field on a grid.

    ``comps`` has shape ``(grid.n_nodes, C)`` with ``C = binom(n+m-1, m)``; the
    canonical multi-indices are the non-decreasing tuples of
    :func:`canonical_indices`.
    """

    def __init__(self, grid: Grid, rank: int, comps=None):
        self.grid = grid
        self.rank = check_rank(rank)
        self.dim = grid.dim
        C = mi.n_components(self.dim, self.rank)
        if comps is None:
            comps = np.zeros((grid.n_nodes, C))
        comps = np.asarray(comps, dtype=np.result_type(comps, float))
        if comps.size != grid.n_nodes * C:
            raise RankMismatchError(
                f"expected {grid.n_nodes}x{C} components for rank {rank}, got shape {comps.shape}")
        self.comps = comps.reshape(grid.n_nodes, C)

    def __repr__(self):
        return f"SymmetricTensorField(rank={self.rank}, dim={self.dim}, shape={self.grid.shape})"

    @property
    def mult(self) -> np.ndarray:
        return mi.multiplicities(self.dim, self.rank)

    @property
    def indices(self) -> tuple:
        return mi.canonical_indices(self.dim, self.rank)

    @property
    def flat(self) -> np.ndarray:
        return self.comps.ravel()

    @classmethod
    def from_flat(cls, grid: Grid, rank: int, vec):
        return cls(grid, rank, np.asarray(vec).reshape(grid.n_nodes, -1))

    @classmethod
    def from_function(cls, grid: Grid, rank: int, func):
        """Sample ``func(points) -> (P, C)`` (canonical components) on the nodes."""
        return cls(grid, rank, func(grid.nodes))

    @classmethod
    def from_full(cls, grid: Grid, full):
        """Symmetrize a full array of shape (N, n, ..., n)."""
        full = np.asarray(full)
        m = full.ndim - 1
        return cls(grid, m, mi.from_full(full, grid.dim, m))

    def to_full(self) -> np.ndarray:
        return mi.to_full(self.comps, self.dim, self.rank)

    def evaluate(self, points) -> np.ndarray:
        return self.grid.interpolate(self.comps, points)

    def copy(self):
        return SymmetricTensorField(self.grid, self.rank, self.comps.copy())

    def norm_inf(self) -> float:
        """Max over nodes of the Frobenius norm of the full tensor."""
        return float(np.sqrt(np.max(np.sum(self.mult * np.abs(self.comps) ** 2, axis=1))))

    def _check_same(self, other):
        if not isinstance(other, SymmetricTensorField) or other.rank != self.rank or other.grid != self.grid:
            raise RankMismatchError("fields must share grid and rank")

    def __add__(self, other):
        self._check_same(other)
        return SymmetricTensorField(self.grid, self.rank, self.comps + other.comps)

    def __sub__(self, other):
        self._check_same(other)
        return SymmetricTensorField(self.grid, self.rank, self.comps - other.comps)

    def __mul__(self, a):
        return SymmetricTensorField(self.grid, self.rank, self.comps * a)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


class AnalyticTensorField:
    """Closed-form symmetric tensor field with exact first derivatives.

    Subclasses implement ``evaluate(points) -> (P, C)`` and
    ``gradient(points) -> (P, n, C)`` where ``[:, k, a] = d_k f_a``.
    """

    rank: int
    dim: int

    def evaluate(self, points) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def gradient(self, points) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def sample(self, grid: Grid) -> SymmetricTensorField:
        return SymmetricTensorField(grid, self.rank, self.evaluate(grid.nodes))


class BumpTensorField(AnalyticTensorField):
    """Sum of radial bumps times constant canonical coefficient vectors.

    f(p) = sum_j coeffs[j] * (1 - |p - centers[j]|^2 / radii[j]^2)_+^power

    With ``power = 2`` the field is C^1 with a kink in its second derivative at
    the support edge, which makes the trapezoid error along rays second order.
    """

    def __init__(self, centers, radii, coeffs, rank: int, power: float = 2.0):
        self.centers = np.atleast_2d(np.asarray(centers, float))
        self.radii = np.atleast_1d(np.asarray(radii, float))
        self.dim = self.centers.shape[1]
        self.rank = check_rank(rank)
        C = mi.n_components(self.dim, self.rank)
        self.coeffs = np.asarray(coeffs, float).reshape(len(self.centers), C)
        if power < 2:
            raise ValidationError("power must be >= 2 for a C^1 field")
        self.power = float(power)

    @classmethod
    def random(cls, rng, rank: int, dim: int = 3, n_bumps: int = 3, support_radius: float = 0.8,
               radius_range=(0.25, 0.5), power: float = 2.0):
        """Random bumps whose supports lie inside the ball of radius ``support_radius``."""
        rmin, rmax = radius_range
        radii = rng.uniform(rmin, rmax, n_bumps)
        centers = []
        for r in radii:
            while True:
                c = rng.uniform(-1, 1, dim) * (support_radius - r)
                if np.linalg.norm(c) + r <= support_radius:
                    centers.append(c)
                    break
        coeffs = rng.standard_normal((n_bumps, mi.n_components(dim, rank)))
        return cls(np.array(centers), radii, coeffs, rank, power)

    def _profile(self, points):
        d = points[:, None, :] - self.centers[None]
        s = np.sum(d**2, axis=2) / self.radii**2
        base = np.clip(1.0 - s, 0.0, None)
        return d, base

    def evaluate(self, points):
        p = check_points(points, self.dim)
        _, base = self._profile(p)
        return (base**self.power) @ self.coeffs

    def gradient(self, points):
        p = check_points(points, self.dim)
        d, base = self._profile(p)
        dphi = -self.power * base ** (self.power - 1) * 2.0 / self.radii**2  # (P, J)
        tmp = np.ascontiguousarray((dphi[:, :, None] * d).transpose(0, 2, 1))  # (P, n, J)
        return tmp @ self.coeffs

    def support_mask(self, points) -> np.ndarray:
        """True where at least one bump is nonzero."""
        p = check_points(points, self.dim)
        return np.any(self._profile(p)[1] > 0, axis=1)


class PolynomialTensorField(AnalyticTensorField):
    """Field whose components are polynomials given as ``{exponent tuple: coeff vector}``."""

    def __init__(self, terms: dict, rank: int, dim: int):
        self.rank = check_rank(rank)
        self.dim = dim
        C = mi.n_components(dim, self.rank)
        self.terms = {tuple(e): np.asarray(c, float).reshape(C) for e, c in terms.items()}

    def evaluate(self, points):
        p = check_points(points, self.dim)
        out = np.zeros((len(p), mi.n_components(self.dim, self.rank)))
        for e, c in self.terms.items():
            out += np.prod(p ** np.array(e), axis=1)[:, None] * c
        return out

    def gradient(self, points):
        p = check_points(points, self.dim)
        out = np.zeros((len(p), self.dim, mi.n_components(self.dim, self.rank)))
        for e, c in self.terms.items():
            e = np.array(e)
            for k in range(self.dim):
                if e[k] == 0:
                    continue
                e2 = e.copy()
                e2[k] -= 1
                out[:, k] += (e[k] * np.prod(p**e2, axis=1))[:, None] * c
        return out


class SymDiffField(AnalyticTensorField):
    """Exact pointwise d^s of an analytic rank-m field; rank m+1, no derivative."""

    def __init__(self, base: AnalyticTensorField, metric=None):
        if base.rank >= 4:
            raise RankOverflowError("sym_diff of a rank-4 field would exceed rank 4")
        self.base = base
        self.metric = metric
        self.rank = base.rank + 1
        self.dim = base.dim

    def evaluate(self, points):
        p = check_points(points, self.dim)
        grad = self.base.gradient(p)
        if self.metric is not None and self.metric.provenance != "euclidean":
            gam = self.metric.christoffel(p, check=False)
            grad = grad - _connection_term(gam, self.base.evaluate(p), self.base.rank)
        return _symmetrize_gradient(grad, self.base.rank)

    def support_mask(self, points) -> np.ndarray:
        if hasattr(self.base, "support_mask"):
            return self.base.support_mask(points)
        return np.ones(len(check_points(points, self.dim)), bool)

    def gradient(self, points):
        raise NotImplementedError("second derivatives of d^s fields are not provided")


def _connection_term(gam, v, m):
    """sum_r Gamma^q_{k a_r} v_{a[r->q]}, shape (P, n, C_m); gam[p, q, k, i] = Gamma^q_ki."""
    P, n = gam.shape[0], gam.shape[1]
    C = v.shape[1]
    vt = (v @ _connection_matrix(n, m)).reshape(P, n, n, C)  # [p, q, i, a]
    g2 = np.ascontiguousarray(gam.transpose(0, 2, 1, 3)).reshape(P, n, n * n)
    return np.matmul(g2, vt.reshape(P, n * n, C))


@lru_cache(maxsize=None)
def _connection_matrix(n, m):
    """T with (v @ T)[q, i, a] = sum over r with a_r = i of v_{a[r->q]}."""
    C = mi.n_components(n, m)
    T = np.zeros((C, n, n, C))
    for a, k, ar, q, a2 in mi.connection_table(n, m):
        if k == 0:
            T[a2, q, ar, a] += 1.0
    return T.reshape(C, n * n * C)


@lru_cache(maxsize=None)
def _symgrad_matrix(n, m):
    C = mi.n_components(n, m)
    S = np.zeros((n * C, mi.n_components(n, m + 1)))
    for b, k, a in mi.symdiff_table(n, m):
        S[k * C + a, b] += 1.0 / (m + 1)
    return S


def _symmetrize_gradient(grad, m):
    """Canonical components of Sym(nabla v) from grad[p, k, a] (rank-m index a)."""
    P, n, _ = grad.shape
    return grad.reshape(P, -1) @ _symgrad_matrix(n, m)


# ---------------------------------------------------------------------------
# pointwise algebra


def symmetrize(T, rank: int | None = None):
    """Canonical components of the symmetrization of full tensors.

    The last ``rank`` axes (default: all axes) are symmetrized; leading axes are
    kept, so a field of full tensors with shape (N, n, ..., n) works with
    ``rank = T.ndim - 1``.
    """
    T = np.asarray(T)
    m = T.ndim if rank is None else rank
    if m > 4:
        raise RankOverflowError("rank must be <= 4")
    if m == 0:
        return T[..., None].astype(float)
    n = T.shape[-1]
    if any(s != n for s in T.shape[T.ndim - m:]):
        raise RankMismatchError("symmetrized axes must have equal length")
    return mi.from_full(T, n, m)


def symmetrize_full(T, m: int | None = None):
    """Full symmetrized array; ``m`` trailing axes are symmetrized (default all)."""
    T = np.asarray(T)
    m = T.ndim if m is None else m
    if m > 4:
        raise RankOverflowError("rank must be <= 4")
    return mi.symmetrize_full(T, m)


def contract_with_velocity(f, p, v) -> np.ndarray:
    """<f(p), v^m> for one or many points; ``f`` is a grid or analytic field."""
    pts = check_points(p, f.dim)
    v = np.asarray(v, float).reshape(-1, f.dim)
    comps = f.evaluate(pts)
    out = mi.contract(comps, v, f.rank)
    return out if out.size > 1 else out.reshape(())[()]


# ---------------------------------------------------------------------------
# differential operators on grids


def christoffel_on_grid(metric, grid: Grid) -> np.ndarray:
    if metric is None or metric.provenance == "euclidean":
        return np.zeros((grid.n_nodes, grid.dim, grid.dim, grid.dim))
    return metric.christoffel(grid.nodes)


def covariant_derivative(f: SymmetricTensorField, metric=None) -> np.ndarray:
    """Full (m+1)-array ``out[node, j1..jm, k] = (nabla_k f)_{j1..jm}``.

    Partial derivatives: central differences inside, second-order one-sided on
    the grid faces.
    """
    if not isinstance(f, SymmetricTensorField):
        raise ValidationError("covariant_derivative expects a grid field")
    grid = f.grid
    n, m = f.dim, f.rank
    vals = f.comps.reshape(grid.shape + (-1,))
    grad = np.stack([np.gradient(vals, grid.spacing[k], axis=k, edge_order=2) for k in range(n)],
                    axis=-2).reshape(grid.n_nodes, n, -1)
    if metric is not None and metric.provenance != "euclidean" and m > 0:
        grad = grad - _connection_term(christoffel_on_grid(metric, grid), f.comps, m)
    # grad[node, k, a]: expand a to full and move k last
    full = mi.to_full(grad, n, m)  # (N, n_k, n, ..., n)
    return np.moveaxis(full, 1, -1)


def sym_diff(f, metric=None):
    """Symmetric differential d^s = Sym nabla, rank m -> m+1.

    Grid fields use the sparse discrete operator; analytic fields return an exact
    pointwise :class:`SymDiffField`.
    """
    if f.rank >= 4:
        raise RankOverflowError("sym_diff is defined for rank <= 3 inputs")
    if isinstance(f, AnalyticTensorField):
        return SymDiffField(f, metric)
    from .operators import sym_diff_matrix

    D = sym_diff_matrix(f.grid, f.rank, metric)
    return SymmetricTensorField.from_flat(f.grid, f.rank + 1, D @ f.flat)


@dataclass(frozen=True)
class InnerProductWeights:
    """Block weights of the M(m) pairing in the x/y block split.

    ``blocks[k]`` is the weight of the block with k factors of dx, i.e.
    ``binom(m, k)``, and ``canonical`` are per-component weights of the
    equivalent Frobenius pairing in canonical storage (the multiplicities).
    """

    rank: int
    dim: int

    @property
    def blocks(self) -> np.ndarray:
        m = self.rank
        return np.array([comb(m, m - j) for j in range(m + 1)], dtype=float)

    @property
    def canonical(self) -> np.ndarray:
        return mi.multiplicities(self.dim, self.rank)


def inner(u: SymmetricTensorField, w: SymmetricTensorField, volume=None) -> float:
    """Discrete M(m)-weighted L^2 pairing with trapezoidal (or given) node volumes."""
    u._check_same(w)
    vol = u.grid.volume_weights if volume is None else volume
    return float(np.sum(vol[:, None] * u.mult * u.comps * np.conj(w.comps)).real)


def divergence_adjoint(w: SymmetricTensorField, metric=None, volume=None, warn: bool = True):
    """delta^s as the exact weighted transpose of the discrete d^s.

    delta^s = W_{m-1}^{-1} D^T W_m with W the diagonal (volume x multiplicity)
    weights, so <d^s u, w> = <u, delta^s w> holds to round-off.
    """
    if w.rank < 1:
        raise RankMismatchError("divergence needs rank >= 1")
    if warn and np.any(w.comps[w.grid.edge_mask] != 0):
        warnings.warn("field touches the grid edge; the adjoint identity then pairs boundary terms",
                      BoundaryContaminationWarning, stacklevel=2)
    from .operators import divergence_matrix

    B = divergence_matrix(w.grid, w.rank - 1, metric, volume)
    return SymmetricTensorField.from_flat(w.grid, w.rank - 1, B @ w.flat)


def conjugate_exp(op: str, F: float, x, grid: Grid, rank: int, metric=None, volume: str = "sc",
                  active=None):
    """Return the sparse matrix of e^{-F/x} op e^{F/x} for op in {"ds", "deltas"}.

    ``x`` holds node values of the boundary coordinate; it must be positive on the
    active nodes.  ``rank`` is the input rank.  The delta^s variant is the exact
    adjoint of the conjugated d^s under the scattering (``"sc"``) or plain
    trapezoidal (``"plain"``) volume form with multiplicity fiber weights.
    """
    from .operators import ConjugatedSymDiff

    cd = ConjugatedSymDiff(grid, rank if op == "ds" else rank - 1, F, x, metric=metric,
                           volume=volume, active=active)
    if op == "ds":
        return cd.D
    if op == "deltas":
        return cd.adjoint_matrix()
    raise ValidationError(f"unknown operator {op!r}; expected 'ds' or 'deltas'")


def xy_counts(indices, x_axis: int):
    """Number of x factors (a) and y factors (b) of each canonical index."""
    a = np.array([sum(1 for i in idx if i == x_axis) for idx in indices])
    b = np.array([len(idx) for idx in indices]) - a
    return a, b


def scattering_basis_convert(f: SymmetricTensorField, x, direction: str = "to_sc", x_axis: int = -1,
                             covariant: bool = False) -> SymmetricTensorField:
    """Rescale components between coordinate and scattering frames.

    The x direction is coordinate axis ``x_axis``.  ``to_sc`` multiplies a
    component with a x-factors and b y-factors by x^{-2a-b}; ``from_sc`` divides.
    With ``covariant=True`` the reciprocal factor x^{2a+b} is used for ``to_sc``,
    which converts covector components dx^i... into the dx/x^2, dy/x frame.
    """
    x = np.asarray(x, float).reshape(-1)
    if np.any(x <= 0):
        raise WeightSingularityError("x must be positive where the scattering frame is used")
    ax = x_axis % f.dim
    a, b = xy_counts(f.indices, ax)
    expo = -(2 * a + b)
    if covariant:
        expo = -expo
    if direction == "from_sc":
        expo = -expo
    elif direction != "to_sc":
        raise ValidationError("direction must be 'to_sc' or 'from_sc'")
    scale = x[:, None] ** expo[None, :]
    return SymmetricTensorField(f.grid, f.rank, f.comps * scale)


# ---------------------------------------------------------------------------
# elasticity


def check_stiffness(a, tol: float = 1e-12) -> np.ndarray:
    a = np.asarray(a, float)
    if a.shape[-4:] != (a.shape[-1],) * 4:
        raise InvalidStiffnessError("stiffness must have four equal trailing axes")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    checks = (np.swapaxes(a, -4, -3), np.swapaxes(a, -2, -1),
              np.moveaxis(a, (-4, -3), (-2, -1)))
    for t in checks:
        if np.max(np.abs(a - t), initial=0.0) > tol * scale:
            raise InvalidStiffnessError("stiffness lacks the minor/major symmetries C_ijkl = C_jikl = C_klij")
    return a


def stiffness_to_symmetric(a, rho, cP):
    """Canonical components of Sym(a / (rho cP^6)).

    ``a`` has shape (n, n, n, n) or (P, n, n, n, n); ``rho`` and ``cP`` are scalars
    or per-point arrays of shape (P,).
    """
    a = check_stiffness(a)
    n = a.shape[-1]
    scale = np.asarray(rho, float) * np.asarray(cP, float) ** 6
    if np.any(scale <= 0):
        raise ValidationError("density and speed must be positive")
    b = a / scale.reshape(scale.shape + (1,) * 4)
    return mi.from_full(b, n, 4)


def isotropic_stiffness(lam: float, mu: float, dim: int = 3) -> np.ndarray:
    """lam d_ij d_kl + mu (d_ik d_jl + d_il d_jk)."""
    d = np.eye(dim)
    return (lam * np.einsum("ij,kl->ijkl", d, d)
            + mu * (np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d)))


def random_stiffness(rng, dim: int = 3, scale: float = 1.0) -> np.ndarray:
    """Random tensor with the elastic symmetries (via a symmetric Voigt-like matrix)."""
    pairs = [(i, j) for i in range(dim) for j in range(i, dim)]
    k = len(pairs)
    A = rng.standard_normal((k, k)) * scale
    A = 0.5 * (A + A.T)
    out = np.zeros((dim,) * 4)
    for p, (i, j) in enumerate(pairs):
        for q, (k_, l) in enumerate(pairs):
            for (a, b) in {(i, j), (j, i)}:
                for (c, d) in {(k_, l), (l, k_)}:
                    out[a, b, c, d] = A[p, q]
    return out


# ---------------------------------------------------------------------------
# file IO


def write_tensor_file(path, f: SymmetricTensorField, sidecar: bool = True) -> None:
    """TRAYTEN1: magic, n, m, grid shape, grid bounds, canonical components row-major."""
    g = f.grid
    with open(path, "wb") as fh:
        fh.write(b"TRAYTEN1")
        fh.write(struct.pack("<qq", f.dim, f.rank))
        fh.write(struct.pack(f"<{f.dim}q", *g.shape))
        fh.write(struct.pack(f"<{2 * f.dim}d", *g.lower, *g.upper))
        fh.write(np.ascontiguousarray(f.comps, "<f8").tobytes())
    if sidecar:
        with open(str(path) + ".idx.txt", "w") as fh:
            fh.write("# canonical multi-index order (0-based), multiplicity\n")
            for idx, mu in zip(f.indices, f.mult):
                fh.write(" ".join(str(i) for i in idx) + f"\t{int(mu)}\n")


def read_tensor_file(path) -> SymmetricTensorField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != b"TRAYTEN1":
        raise ValidationError(f"{path}: bad magic, expected TRAYTEN1")
    n, m = struct.unpack_from("<qq", data, 8)
    off = 24
    shape = struct.unpack_from(f"<{n}q", data, off)
    off += 8 * n
    bounds = struct.unpack_from(f"<{2 * n}d", data, off)
    off += 16 * n
    grid = Grid(bounds[:n], bounds[n:], shape)
    C = mi.n_components(n, m)
    count = grid.n_nodes * C
    if len(data) - off != 8 * count:
        raise ValidationError(f"{path}: truncated tensor data")
    comps = np.frombuffer(data, "<f8", count, off).reshape(grid.n_nodes, C).copy()
    return SymmetricTensorField(grid, m, comps)
