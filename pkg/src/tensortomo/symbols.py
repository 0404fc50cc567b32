"""Principal symbols in the x/y block split and numerical ellipticity certificates.

A symmetric m-tensor is stored as blocks j = 0..m, block j holding the canonical
components of its part with j factors of dy/x (and m - j factors of dx/x^2) as a
symmetric j-tensor on Y = R^{n-1}.  The pairing M(m) weights block j by
binom(m, j) times the Frobenius pairing, which in canonical storage is a diagonal
weight binom(m, j) * multiplicity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Optional

import numpy as np

from . import _multiindex as mi
from ._validation import check_random_state, check_scalar
from .errors import InsufficientRowsError, SymbolRegressionError, ValidationError
from .geometry import sphere_samples


# ---------------------------------------------------------------------------
# block layout and elementary maps


@dataclass(frozen=True)
class BlockLayout:
    n: int
    m: int

    @property
    def sizes(self):
        return [mi.n_components(self.n - 1, j) for j in range(self.m + 1)]

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    def block(self, j) -> slice:
        o = self.offsets
        return slice(o[j], o[j + 1])

    @property
    def weights(self) -> np.ndarray:
        """Diagonal of M(m) in canonical storage."""
        return np.concatenate([comb(self.m, j) * mi.multiplicities(self.n - 1, j)
                               for j in range(self.m + 1)])


def sym_mul(eta, j: int) -> np.ndarray:
    """eta (x)_s : Sym^j -> Sym^{j+1} on R^k in canonical storage."""
    eta = np.asarray(eta)
    k = len(eta)
    out = np.zeros((mi.n_components(k, j + 1), mi.n_components(k, j)), dtype=eta.dtype)
    for b, kk, a in mi.symdiff_table(k, j):
        out[b, a] += eta[kk] / (j + 1)
    return out


def iota(eta, j: int) -> np.ndarray:
    """Contraction iota_eta : Sym^{j+1} -> Sym^j in canonical storage."""
    eta = np.asarray(eta)
    k = len(eta)
    out = np.zeros((mi.n_components(k, j), mi.n_components(k, j + 1)), dtype=eta.dtype)
    for a, alpha in enumerate(mi.canonical_indices(k, j)):
        for kk in range(k):
            out[a, mi.position(alpha + (kk,), k)] += eta[kk]
    return out


def frobenius_adjoint(A: np.ndarray, k: int, j_in: int, j_out: int) -> np.ndarray:
    """<A u, w> = <u, A^* w> for the Frobenius pairing of symmetric tensors on R^k."""
    w_in = mi.multiplicities(k, j_in)
    w_out = mi.multiplicities(k, j_out)
    return (np.conj(A).T * w_out[None, :]) / w_in[:, None]


def weighted_adjoint(A: np.ndarray, w_in: np.ndarray, w_out: np.ndarray) -> np.ndarray:
    """B = W_in^{-1} A^H W_out."""
    return (np.conj(A).T * w_out[None, :]) / w_in[:, None]


@dataclass
class CurvatureCoefficients:
    """Lower-order symbol entries from the Christoffel terms.

    ``a``: Sym^0 -> Sym^2, ``b``: Sym^1 -> Sym^3, ``c``: Sym^2 -> Sym^4 (rank 3 -> 4 map);
    ``d``: Sym^0 -> Sym^2, ``e``: Sym^1 -> Sym^3 (rank 2 -> 3 map).  All act on
    canonical storage over Y = R^{n-1}.  Zero means the flat model.
    """

    n: int = 3
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None
    bound: float = 0.0

    _maps = {"a": (0, 2), "b": (1, 3), "c": (2, 4), "d": (0, 2), "e": (1, 3)}

    def __post_init__(self):
        k = self.n - 1
        for name, (ji, jo) in self._maps.items():
            shape = (mi.n_components(k, jo), mi.n_components(k, ji))
            val = getattr(self, name)
            if val is None:
                val = np.zeros(shape)
            val = np.asarray(val, float)
            if val.shape != shape:
                raise ValidationError(f"curvature map {name} must have shape {shape}")
            setattr(self, name, val)

    @classmethod
    def zero(cls, n: int = 3):
        return cls(n)

    @classmethod
    def random(cls, C: float, n: int = 3, seed=None):
        """Random maps with weighted operator norm uniform in (0, C]."""
        rng = check_random_state(seed)
        k = n - 1
        maps = {}
        for name, (ji, jo) in cls._maps.items():
            A = rng.standard_normal((mi.n_components(k, jo), mi.n_components(k, ji)))
            nrm = _frob_opnorm(A, k, ji, jo)
            maps[name] = A * (C * rng.uniform(0.1, 1.0) / nrm) if nrm > 0 else A
        return cls(n, bound=float(C), **maps)

    def scaled(self, s: float) -> "CurvatureCoefficients":
        return CurvatureCoefficients(self.n, self.a * s, self.b * s, self.c * s, self.d * s, self.e * s,
                                     self.bound * abs(s))

    def norms(self) -> dict:
        k = self.n - 1
        return {name: _frob_opnorm(getattr(self, name), k, ji, jo)
                for name, (ji, jo) in self._maps.items()}

    def adj(self, name):
        ji, jo = self._maps[name]
        return frobenius_adjoint(getattr(self, name), self.n - 1, ji, jo)


def _frob_opnorm(A, k, ji, jo):
    wi = np.sqrt(mi.multiplicities(k, ji))
    wo = np.sqrt(mi.multiplicities(k, jo))
    return float(np.linalg.norm(wo[:, None] * A / wi[None, :], 2))


@dataclass
class BlockSymbol:
    """Complex matrix between block layouts ``layout_in`` -> ``layout_out``."""

    matrix: np.ndarray
    layout_out: BlockLayout
    layout_in: BlockLayout

    def block(self, i, j) -> np.ndarray:
        return self.matrix[self.layout_out.block(i), self.layout_in.block(j)]

    def adjoint(self) -> "BlockSymbol":
        return BlockSymbol(weighted_adjoint(self.matrix, self.layout_in.weights, self.layout_out.weights),
                           self.layout_in, self.layout_out)

    def __matmul__(self, other: "BlockSymbol") -> "BlockSymbol":
        if self.layout_in != other.layout_out:
            raise ValidationError("incompatible block layouts")
        return BlockSymbol(self.matrix @ other.matrix, self.layout_out, other.layout_in)


def _split(xi, eta, n):
    eta = np.atleast_1d(np.asarray(eta, float))
    if eta.shape != (n - 1,):
        raise ValidationError(f"eta must have length n-1 = {n - 1}")
    return float(xi), eta


def _curv(curv, n):
    if curv is None:
        return CurvatureCoefficients(n)
    if curv.n != n:
        raise ValidationError("curvature coefficients built for a different dimension")
    return curv


# ---------------------------------------------------------------------------
# rank 3 -> 4 (and 2 -> 3) symbols


def ds_symbol(xi, eta, F: float = 0.0, curv=None, m: int = 3, n: int = 3) -> BlockSymbol:
    """Principal symbol of d^s_F from rank m to m+1 (m = 2 or 3).

    Diagonal (m+1-j)/(m+1) (xi + iF) from block j to block j, sub-diagonal
    j/(m+1) eta (x)_s from block j-1 to block j, plus the curvature maps
    (a, b, c for m = 3; d, e for m = 2) from block j to block j+2.
    """
    xi, eta = _split(xi, eta, n)
    curv = _curv(curv, n)
    lin, lout = BlockLayout(n, m), BlockLayout(n, m + 1)
    z = xi + 1j * F
    A = np.zeros((lout.dim, lin.dim), complex)
    for j in range(m + 1):
        A[lout.block(j), lin.block(j)] += (m + 1 - j) / (m + 1) * z * np.eye(lin.sizes[j])
    for j in range(1, m + 2):
        A[lout.block(j), lin.block(j - 1)] += j / (m + 1) * sym_mul(eta, j - 1)
    names = {3: "abc", 2: "de"}.get(m)
    if names is None:
        raise ValidationError("ds_symbol supports m = 2 and m = 3")
    for j, nm in enumerate(names):
        A[lout.block(j + 2), lin.block(j)] += getattr(curv, nm)
    return BlockSymbol(A, lout, lin)


def dsF_symbol(xi, eta, F: float = 0.0, curv=None, n: int = 3) -> BlockSymbol:
    """Symbol of d^s_F on symmetric 3-tensors (3 -> 4)."""
    return ds_symbol(xi, eta, F, curv, 3, n)


def deltasF_symbol(xi, eta, F: float = 0.0, curv=None, n: int = 3, displayed: bool = False) -> BlockSymbol:
    """Symbol of delta^s_F (4 -> 3).

    By default the (3,4)-adjoint M(3)^{-1} A^* M(4) of :func:`dsF_symbol`; with
    ``displayed=True`` the block matrix is assembled entry by entry from the
    closed form (conj(z) on the diagonal, iota_eta above it, and the scaled
    curvature adjoints 6<a,.>, 4/3<b,.>, 1/3<c,.>).
    """
    if not displayed:
        return dsF_symbol(xi, eta, F, curv, n).adjoint()
    xi, eta = _split(xi, eta, n)
    curv = _curv(curv, n)
    lin, lout = BlockLayout(n, 4), BlockLayout(n, 3)
    zb = xi - 1j * F
    B = np.zeros((lout.dim, lin.dim), complex)
    for j in range(4):
        B[lout.block(j), lin.block(j)] = zb * np.eye(lout.sizes[j])
        B[lout.block(j), lin.block(j + 1)] = iota(eta, j)
    B[lout.block(0), lin.block(2)] = 6 * curv.adj("a")
    B[lout.block(1), lin.block(3)] = 4 / 3 * curv.adj("b")
    B[lout.block(2), lin.block(4)] = 1 / 3 * curv.adj("c")
    return BlockSymbol(B, lout, lin)


def product_DD(xi, eta, F: float = 0.0, curv=None, n: int = 3) -> BlockSymbol:
    """Symbol of d^s_F delta^s_F on symmetric 4-tensors as a matrix product."""
    return dsF_symbol(xi, eta, F, curv, n) @ deltasF_symbol(xi, eta, F, curv, n)


# Entries of the displayed d delta product that disagree with the matrix product.
# key: (row, col) 0-based block; value: (displayed coefficient, product coefficient)
DD_DISPLAY_CORRECTIONS = {(1, 1): ("1/4 (|xi|^2 + F^2)", "3/4 (|xi|^2 + F^2)")}


def printed_DD(xi, eta, F: float = 0.0, curv=None, n: int = 3, as_printed: bool = False,
               mutate=None) -> BlockSymbol:
    """The d delta product assembled entry by entry from its closed-form display.

    The display's (1,1) block lists 1/4 (|xi|^2 + F^2); the matrix product gives
    3/4, which is used unless ``as_printed`` is set.  ``mutate = (i, j)`` flips the
    sign of one block (a test hook for the regression check).
    """
    xi, eta = _split(xi, eta, n)
    curv = _curv(curv, n)
    L = BlockLayout(n, 4)
    z, zb = xi + 1j * F, xi - 1j * F
    q = xi**2 + F**2
    I = [np.eye(s) for s in L.sizes]
    S = [sym_mul(eta, j) for j in range(4)]  # block j -> j+1
    T = [iota(eta, j) for j in range(4)]  # block j+1 -> j
    a, b, c = curv.a, curv.b, curv.c
    aa, ba, ca = curv.adj("a"), curv.adj("b"), curv.adj("c")
    c11 = 0.25 if as_printed else 0.75
    E = {
        (0, 0): q * I[0], (0, 1): z * T[0], (0, 2): 6 * z * aa,
        (1, 0): 0.25 * zb * S[0], (1, 1): 0.25 * S[0] @ T[0] + c11 * q * I[1],
        (1, 2): 1.5 * S[0] @ aa + 0.75 * z * T[1], (1, 3): z * ba,
        (2, 0): zb * a, (2, 1): a @ T[0] + 0.5 * zb * S[1],
        (2, 2): 6 * a @ aa + 0.5 * S[1] @ T[1] + 0.5 * q * I[2],
        (2, 3): 2 / 3 * S[1] @ ba + 0.5 * z * T[2], (2, 4): z / 6 * ca,
        (3, 1): zb * b, (3, 2): b @ T[1] + 0.75 * zb * S[2],
        (3, 3): 4 / 3 * b @ ba + 0.75 * S[2] @ T[2] + 0.25 * q * I[3],
        (3, 4): 0.25 * S[2] @ ca + 0.25 * z * T[3],
        (4, 2): zb * c, (4, 3): c @ T[2] + zb * S[3], (4, 4): c @ ca / 3 + S[3] @ T[3],
    }
    if mutate is not None:
        E[tuple(mutate)] = -E[tuple(mutate)]
    M = np.zeros((L.dim, L.dim), complex)
    for (i, j), blk in E.items():
        M[L.block(i), L.block(j)] = blk
    return BlockSymbol(M, L, L)


def symbol_regression(xi, eta, F: float = 0.0, curv=None, n: int = 3, tol: float = 1e-12,
                      raise_on_fail: bool = True, mutate=None) -> dict:
    """Compare the matrix product with the displayed entries block by block.

    Errors are relative to max(1, xi^2 + F^2 + |eta|^2).
    """
    P = product_DD(xi, eta, F, curv, n)
    D = printed_DD(xi, eta, F, curv, n, mutate=mutate)
    scale = max(1.0, abs(xi) ** 2 + F**2 + float(np.dot(eta, eta)))
    errs = {}
    for i in range(5):
        for j in range(5):
            errs[(i, j)] = float(np.max(np.abs(P.block(i, j) - D.block(i, j)), initial=0.0)) / scale
    worst = max(errs.values())
    if raise_on_fail and worst > tol:
        bad = [k for k, v in errs.items() if v > tol]
        raise SymbolRegressionError(f"displayed entries {bad} differ from the product (max {worst:.3e})")
    return {"max_error": worst, "entries": errs}


# rank-3 displays for the Witten Laplacian

# (row, col): (displayed, product) for the corrected entries of the two displays
RANK3_DISPLAY_CORRECTIONS = {
    ("d_delta", 2, 2): ("1/3 (xi + F^2)", "1/3 (xi^2 + F^2)"),
    ("d_delta", 2, 3): ("1/3 (xi + F) iota", "1/3 (xi + iF) iota"),
    ("d_delta", 3, 1): ("(xi + iF) e", "(xi - iF) e"),
    ("delta_d", 2, 2): ("<c,.> c", "1/3 <c,.> c"),
}


def rank3_delta_d(xi, eta, F=0.0, curv=None, n=3) -> BlockSymbol:
    """delta^s_F d^s_F on symmetric 3-tensors (matrix product)."""
    return deltasF_symbol(xi, eta, F, curv, n) @ dsF_symbol(xi, eta, F, curv, n)


def rank3_d_delta(xi, eta, F=0.0, curv=None, n=3) -> BlockSymbol:
    """d^s_F delta^s_F on symmetric 3-tensors, using the 2 -> 3 symbol."""
    d2 = ds_symbol(xi, eta, F, curv, 2, n)
    return d2 @ d2.adjoint()


def printed_rank3(kind: str, xi, eta, F=0.0, curv=None, n=3, as_printed: bool = False) -> BlockSymbol:
    """Displayed rank-3 symbols (``kind`` = "delta_d" or "d_delta"), corrected unless ``as_printed``."""
    xi, eta = _split(xi, eta, n)
    curv = _curv(curv, n)
    L = BlockLayout(n, 3)
    z, zb = xi + 1j * F, xi - 1j * F
    q = xi**2 + F**2
    e2 = float(np.dot(eta, eta))
    I = [np.eye(s) for s in L.sizes]
    S = [sym_mul(eta, j) for j in range(4)]
    T = [iota(eta, j) for j in range(4)]
    if kind == "delta_d":
        a, b, c = curv.a, curv.b, curv.c
        aa, ba, ca = curv.adj("a"), curv.adj("b"), curv.adj("c")
        c22 = 1.0 if as_printed else 1 / 3
        E = {
            (0, 0): (q + 0.25 * e2) * I[0] + 6 * aa @ a, (0, 1): 0.75 * z * T[0] + 3 * aa @ S[1],
            (0, 2): 3 * z * aa,
            (1, 0): 0.25 * zb * S[0] + T[1] @ a,
            (1, 1): 0.75 * q * I[1] + 0.5 * T[1] @ S[1] + 4 / 3 * ba @ b,
            (1, 2): 0.5 * z * T[1] + ba @ S[2], (1, 3): z / 3 * ba,
            (2, 0): zb * a, (2, 1): 0.5 * zb * S[1] + T[2] @ b,
            (2, 2): 0.5 * q * I[2] + 0.75 * T[2] @ S[2] + c22 * ca @ c,
            (2, 3): 0.25 * z * T[2] + ca @ S[3] / 3,
            (3, 1): zb * b, (3, 2): 0.75 * zb * S[2] + T[3] @ c,
            (3, 3): 0.25 * q * I[3] + T[3] @ S[3],
        }
    elif kind == "d_delta":
        d, e = curv.d, curv.e
        da, ea = curv.adj("d"), curv.adj("e")
        q22 = (xi + F**2) if as_printed else q
        z23 = (xi + F) if as_printed else z
        e31 = z if as_printed else zb
        E = {
            (0, 0): q * I[0], (0, 1): z * T[0], (0, 2): 3 * z * da,
            (1, 0): zb / 3 * S[0], (1, 1): 2 / 3 * q * I[1] + S[0] @ T[0] / 3,
            (1, 2): 2 / 3 * z * T[1] + S[0] @ da, (1, 3): z / 3 * ea,
            (2, 0): zb * d, (2, 1): 2 / 3 * zb * S[1] + d @ T[0],
            (2, 2): q22 / 3 * I[2] + 2 / 3 * S[1] @ T[1] + 3 * d @ da,
            (2, 3): z23 / 3 * T[2] + S[1] @ ea / 3,
            (3, 1): e31 * e, (3, 2): zb * S[2] + e @ T[1], (3, 3): S[2] @ T[2] + 0.5 * e @ ea,
        }
    else:
        raise ValidationError("kind must be 'delta_d' or 'd_delta'")
    M = np.zeros((L.dim, L.dim), complex)
    for (i, j), blk in E.items():
        M[L.block(i), L.block(j)] = blk
    return BlockSymbol(M, L, L)


def connection_symbol_normal(xi, eta, F=0.0, n=3) -> float:
    """Symbol of nabla_F^* nabla_F on symmetric 3-tensors: (xi^2 + F^2 + |eta|^2) Id."""
    return xi**2 + F**2 + float(np.dot(eta, eta))


@dataclass
class WittenCheck:
    residual: float
    remainder_norm: float
    remainder_bound: float
    min_eig: float
    lower_bound: float

    @property
    def passed(self) -> bool:
        return self.remainder_norm <= self.remainder_bound + 1e-12


def witten_factorization_check(xi, eta, F=0.0, curv=None, n=3, K: float = 10.0) -> WittenCheck:
    """delta d - 1/4 nabla^* nabla - 3/4 d delta on symmetric 3-tensors.

    ``residual`` is the relative norm of the remainder (zero for flat curvature);
    ``remainder_bound`` is K (C^2 + C(|xi| + |eta| + F)) with C the curvature bound.
    ``min_eig`` is the smallest eigenvalue of the M(3)-self-adjoint delta d.
    """
    xi, eta = _split(xi, eta, n)
    curv = _curv(curv, n)
    L = BlockLayout(n, 3)
    lhs = rank3_delta_d(xi, eta, F, curv, n).matrix
    rhs = 0.25 * connection_symbol_normal(xi, eta, F, n) * np.eye(L.dim) + 0.75 * rank3_d_delta(
        xi, eta, F, curv, n).matrix
    R = lhs - rhs
    w = np.sqrt(L.weights)
    Rw = w[:, None] * R / w[None, :]
    rem = float(np.linalg.norm(Rw, 2))
    scale = max(1.0, connection_symbol_normal(xi, eta, F, n))
    C = max(curv.bound, max(curv.norms().values()))
    bound = K * (C**2 + C * (abs(xi) + np.linalg.norm(eta) + abs(F)))
    H = w[:, None] * lhs / w[None, :]
    H = 0.5 * (H + H.conj().T)
    ev = float(np.linalg.eigvalsh(H)[0])
    return WittenCheck(rem / scale, rem, bound, ev, 0.25 * connection_symbol_normal(xi, eta, F, n))


def witten_threshold(C: float, n: int = 3, F_grid=None, samples: int = 200, seed=0) -> dict:
    """Smallest F on a grid for which delta d stays positive over sampled (xi, eta)."""
    rng = check_random_state(seed)
    F_grid = np.linspace(0, 20, 41) if F_grid is None else np.asarray(F_grid, float)
    curv = CurvatureCoefficients.random(C, n, rng)
    pts = rng.standard_normal((samples, n))
    pts *= rng.uniform(0, 10, samples)[:, None] / np.linalg.norm(pts, axis=1, keepdims=True)
    mins = []
    for F in F_grid:
        mins.append(min(witten_factorization_check(p[0], p[1:], F, curv, n).min_eig for p in pts))
    mins = np.array(mins)
    ok = mins > 0
    thr = None
    for i in range(len(F_grid)):
        if ok[i:].all():
            thr = float(F_grid[i])
            break
    return {"F": F_grid, "min_eig": mins, "threshold": thr}


# ---------------------------------------------------------------------------
# projector and Gaussian cutoff


def tensor_power_blocks(S: float, Yhat, m: int = 4) -> np.ndarray:
    """Column (S^m, S^{m-1} Y, ..., Y^m) in the rank-m block layout."""
    Yhat = np.asarray(Yhat)
    return np.concatenate([S ** (m - j) * mi.monomials(Yhat, j).reshape(-1) for j in range(m + 1)])


def projector_integrand(S: float, Yhat, m: int = 4) -> np.ndarray:
    """Rank-one matrix a a^T M(m) with a the tensor-power column."""
    Yhat = np.asarray(Yhat, float)
    if abs(np.linalg.norm(Yhat) - 1) > 1e-12:
        raise ValidationError("Yhat must be a unit vector")
    n = len(Yhat) + 1
    a = tensor_power_blocks(S, Yhat, m)
    return np.outer(a, a * BlockLayout(n, m).weights)


def gaussian_cutoff_transform(nu: float, L: float = None, N: int = 2**14, sigma=None) -> dict:
    """Fourier transform int e^{-i s sigma} chi(s) ds of chi = exp(-s^2/(2 nu)).

    Computed by trapezoid quadrature on [-L, L]; compared with c sqrt(nu) exp(-nu sigma^2/2).
    Returns the fitted constant c (sqrt(2 pi) in this convention) and the max error.
    """
    check_scalar(nu, "nu", lower=0, lower_inclusive=False)
    L = 40 * np.sqrt(nu) if L is None else L
    s = np.linspace(-L, L, N + 1)
    ds = s[1] - s[0]
    sigma = np.linspace(-6 / np.sqrt(nu), 6 / np.sqrt(nu), 121) if sigma is None else np.asarray(sigma)
    chi = np.exp(-s**2 / (2 * nu))
    w = np.full(len(s), ds)
    w[[0, -1]] *= 0.5
    hat = (np.exp(-1j * np.outer(sigma, s)) * (w * chi)).sum(axis=1)
    model = np.sqrt(nu) * np.exp(-nu * sigma**2 / 2)
    c = float(hat.real[np.argmin(np.abs(sigma))] / np.sqrt(nu))
    err = float(np.max(np.abs(hat - c * model)))
    return {"nu": nu, "c": c, "c_exact": float(np.sqrt(2 * np.pi)), "max_error": err,
            "sigma": sigma, "transform": hat}


# ---------------------------------------------------------------------------
# ellipticity certificates


@dataclass
class Certificate:
    min_sigma: float
    trivial_kernel: bool
    rows: int
    unknowns: int
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.trivial_kernel


def _row_normalized_min_sigma(A: np.ndarray) -> float:
    nr = np.linalg.norm(A, axis=1)
    A = A[nr > 0] / nr[nr > 0, None]
    if A.shape[0] < A.shape[1]:
        return 0.0
    return float(np.linalg.svd(A, compute_uv=False)[-1])


def _y_frame(eta):
    """Unit eta-hat and an orthonormal basis of its complement (arbitrary if eta = 0)."""
    k = len(eta)
    nrm = np.linalg.norm(eta)
    e = eta / nrm if nrm > 0 else np.eye(k)[0]
    Q, _ = np.linalg.qr(np.column_stack([e, np.eye(k)]))
    Q[:, 0] *= np.sign(Q[:, 0] @ e) or 1.0
    return Q[:, 0], Q[:, 1:]


def _kernel_rows(zeta_bar, eta, n, curv_rows=None):
    """Rows of  conj(zeta) f_j + iota_eta f_{j+1} = 0, j = 0..3 (rank-4 unknowns)."""
    L4, L3 = BlockLayout(n, 4), BlockLayout(n, 3)
    A = np.zeros((L3.dim, L4.dim), complex)
    for j in range(4):
        A[L3.block(j), L4.block(j)] = zeta_bar * np.eye(L3.sizes[j])
        A[L3.block(j), L4.block(j + 1)] = iota(eta, j)
    if curv_rows is not None:
        A = A + curv_rows
    return A


def _projector_row(coeffs, Yhat, n):
    """sum_j binom(4, j) coeffs[4-j] <Y^j, f_j>; coeffs[k] multiplies the block with 4-k y's."""
    return np.concatenate([comb(4, j) * coeffs[4 - j] * mi.multiplicities(n - 1, j)
                           * mi.monomials(np.asarray(Yhat), j).reshape(-1) for j in range(5)])


def _equator_samples(xi, eta, n, n_eps=9, n_s=9, n_perp=None):
    """(S, Yhat) pairs on S xi + Yhat . eta = 0: an epsilon grid and an S grid."""
    k = n - 1
    eh, perp = _y_frame(eta)
    # for k > 2 the sample circles through eta_hat must not lie on the zero set of a
    # product of four planes, so use more than four of them
    n_perp = n_perp or (2 if k == 2 else 12)
    dirs = sphere_samples(k - 1, n_perp) @ perp.T if k > 1 else np.zeros((1, k))
    ne = np.linalg.norm(eta)
    out = []
    for u in dirs:
        if abs(xi) > 0:
            for eps in np.linspace(-1, 1, n_eps):
                Y = eps * eh + np.sqrt(max(0.0, 1 - eps**2)) * u
                out.append((-(Y @ eta) / xi, Y))
            if ne > 0:
                for S in np.linspace(-2, 2, n_s):
                    eps = -S * xi / ne
                    if abs(eps) <= 1:
                        out.append((S, eps * eh + np.sqrt(1 - eps**2) * u))
        else:
            for S in np.linspace(-2, 2, n_s):
                out.append((S, u))
    return out


def fiber_infinity_certificate(xi, eta, n: int = 3, tol: float = 1e-8, n_eps: int = 9,
                               n_s: int = 9) -> Certificate:
    """Trivial-kernel certificate at fiber infinity for the direction (xi, eta).

    Stacks  xi f_j + <eta, f_{j+1}> = 0  (j = 0..3) with the projector constraints
    sum_j binom(4,j) S^{4-j} <Y^j, f_j> = 0  for (S, Y) on the equatorial sphere.
    """
    xi, eta = _split(xi, eta, n)
    if xi == 0 and not np.any(eta):
        raise ValidationError("(xi, eta) must be non-zero")
    nrm = np.hypot(xi, np.linalg.norm(eta))
    xi, eta = xi / nrm, eta / nrm
    if abs(xi) < 1e-14:
        xi = 0.0
    A = _kernel_rows(xi, eta, n).real
    rows = [A]
    for S, Y in _equator_samples(xi, eta, n, n_eps, n_s):
        rows.append(_projector_row([S**k for k in range(5)], Y, n)[None, :])
    M = np.vstack(rows)
    if M.shape[0] < M.shape[1]:
        raise InsufficientRowsError(f"{M.shape[0]} rows for {M.shape[1]} unknowns")
    s = _row_normalized_min_sigma(M)
    return Certificate(s, s > tol, M.shape[0], M.shape[1], {"xi": xi, "eta": eta})


def finite_point_coefficients(xi_F, rho):
    """c_k = (-1)^k (xi_F^2 + 1)^{-k} (xi_F - i)^k rho^k, k = 0..4."""
    base = -(xi_F - 1j) * rho / (xi_F**2 + 1)
    return [base**k for k in range(5)]


@dataclass(frozen=True)
class FinitePointSymbolParams:
    """Semiclassical parameters: h = 1/F, nu = alpha / F, phi = nu (xi^2 + F^2)."""

    alpha: float = 1.0
    F: float = 1.0

    @property
    def h(self):
        return 1.0 / self.F

    @property
    def nu(self):
        return self.alpha / self.F

    def phi(self, xi):
        return self.nu * (xi**2 + self.F**2)

    def phi_from_definition(self, xi):
        z = xi + 1j * self.F
        return z * (self.nu * z - 2j * self.alpha)

    def coefficients(self, xi, eta, Yhat):
        """c_k from the unscaled definition nu^k (xi - iF)^k (-Y.eta/phi)^k."""
        r = float(np.dot(Yhat, eta)) / self.phi(xi)
        return [(-self.nu * (xi - 1j * self.F) * r) ** k for k in range(5)]


def finite_point_certificate(xi_F, eta_F, n: int = 3, h: float = 0.0, curv=None, n_Y: Optional[int] = None,
                             tol: float = 1e-8, rank_check: bool = True) -> Certificate:
    """Trivial-kernel certificate at a finite point in semiclassical variables.

    Rows: the delta_F symbol divided by F (conj(xi_F - i) diagonal, iota_{eta_F},
    curvature scaled by h), and for each sampled Y the projector constraint with
    the coefficients c_k.  With ``rank_check`` the five tensor families
    Sym(eta_hat^k Y_perp^{4-k}) are verified to follow from the delta rows plus the
    epsilon-Taylor coefficients of the projector constraint up to order 4 - k ... 4.
    """
    xi_F, eta_F = _split(xi_F, eta_F, n)
    curv = _curv(curv, n)
    B = deltasF_symbol(xi_F, eta_F, 1.0, curv.scaled(h), n).matrix
    rows = [B]
    n_Y = n_Y or max(12, 2 * mi.n_components(n - 1, 4) + 2)
    for Y in sphere_samples(n - 1, n_Y):
        rows.append(_projector_row(finite_point_coefficients(xi_F, Y @ eta_F), Y, n)[None, :])
    M = np.vstack(rows)
    s = _row_normalized_min_sigma(M)
    margin = s - h * max(curv.bound, max(curv.norms().values())) * 10.0
    details = {"xi_F": xi_F, "eta_F": eta_F, "h": h, "margin": margin}
    if rank_check:
        details["families"] = epsilon_family_check(xi_F, eta_F, n)
    return Certificate(s, s > tol and margin > 0, M.shape[0], M.shape[1], details)


def epsilon_family_check(xi_F, eta_F, n: int = 3, radius: float = 0.5, N: int = 32,
                         rtol: float = 1e-9) -> dict:
    """Rank check of the epsilon-derivative argument at h = 0.

    The projector constraint along Y(eps) = eps eta_hat + sqrt(1 - eps^2) Y_perp is
    analytic in eps; its Taylor coefficients are obtained by FFT on a circle.  For
    each k the family Sym(eta_hat^{4-k'}...) functional with k factors of eta_hat must
    lie in the span of the delta rows and the Taylor rows of orders 0..k.
    """
    xi_F, eta_F = _split(xi_F, eta_F, n)
    eh, perp = _y_frame(eta_F)
    u = perp[:, 0]
    L4 = BlockLayout(n, 4)
    base = _kernel_rows(xi_F - 1j, eta_F, n)
    th = 2 * np.pi * np.arange(N) / N
    eps = radius * np.exp(1j * th)
    R = []
    for e in eps:
        Y = e * eh + np.sqrt(1 - e**2) * u
        rho = Y @ eta_F
        R.append(_projector_row(finite_point_coefficients(xi_F, rho), Y, n))
    R = np.array(R)
    coef = np.fft.fft(R, axis=0) / N  # coef[k] = sum R(eps_j) e^{-ik th_j} / N
    taylor = np.array([coef[k] / radius**k for k in range(5)])
    results = {}
    for k in range(5):
        fam = np.zeros(L4.dim, complex)
        T = mi.from_full(_sym_outer([eh] * k + [u] * (4 - k)), n - 1, 4)
        fam[L4.block(4)] = mi.multiplicities(n - 1, 4) * T
        span = np.vstack([base, taylor[: k + 1]])
        r0 = _rank(span, rtol)
        r1 = _rank(np.vstack([span, fam[None, :]]), rtol)
        results[k] = bool(r1 == r0)
    return results


def _sym_outer(vectors):
    out = np.array(1.0)
    for v in vectors:
        out = np.multiply.outer(out, v)
    return mi.symmetrize_full(out, len(vectors))


def _rank(A, rtol):
    s = np.linalg.svd(A, compute_uv=False)
    return int(np.sum(s > rtol * s[0]))


def sweep_fiber_infinity(count: int = 1000, n: int = 3, include_xi_zero: bool = True, **kw) -> dict:
    """Certificates over ``count`` directions on the (xi, eta) sphere."""
    dirs = sphere_samples(n, count)
    if include_xi_zero:
        ring = sphere_samples(n - 1, 8)
        dirs = np.vstack([dirs, np.column_stack([np.zeros(len(ring)), ring])])
    sig = np.array([fiber_infinity_certificate(d[0], d[1:], n, **kw).min_sigma for d in dirs])
    i = int(np.argmin(sig))
    return {"directions": dirs, "min_sigma": sig, "worst": float(sig[i]), "worst_direction": dirs[i],
            "all_trivial": bool(np.all(sig > kw.get("tol", 1e-8)))}


def sweep_finite_points(xi_range=(-3, 3), eta_range=(0, 3), shape=(31, 31), n: int = 3, **kw) -> dict:
    """Certificates on a grid of (xi_F, |eta_F|), eta_F along the first Y axis."""
    xs = np.linspace(*xi_range, shape[0])
    es = np.linspace(*eta_range, shape[1])
    sig = np.zeros(shape)
    fam_ok = True
    for i, xf in enumerate(xs):
        for j, ef in enumerate(es):
            eta = np.zeros(n - 1)
            eta[0] = ef
            cert = finite_point_certificate(xf, eta, n, rank_check=ef > 0, **kw)
            sig[i, j] = cert.min_sigma
            if ef > 0:
                fam_ok &= all(cert.details["families"].values())
    i, j = np.unravel_index(np.argmin(sig), sig.shape)
    return {"xi_F": xs, "eta_F": es, "min_sigma": sig, "worst": float(sig[i, j]),
            "worst_point": (float(xs[i]), float(es[j])), "families_ok": bool(fam_ok),
            "all_trivial": bool(np.all(sig > kw.get("tol", 1e-8)))}


def certificate_report(records) -> str:
    """Structured text: one line per sampled point plus a summary line."""
    lines = ["# xi eta F min_sigma verdict"]
    worst = np.inf
    for r in records:
        eta = " ".join(f"{v:.6g}" for v in np.atleast_1d(r["eta"]))
        lines.append(f"{r['xi']:.6g} [{eta}] {r.get('F', 0.0):.6g} {r['min_sigma']:.6e} "
                     f"{'trivial' if r['trivial'] else 'KERNEL'}")
        worst = min(worst, r["min_sigma"])
    ok = all(r["trivial"] for r in records)
    lines.append(f"summary points={len(records)} min_sigma={worst:.6e} verdict={'trivial' if ok else 'kernel'}")
    return "\n".join(lines) + "\n"
