"""Canonical (non-decreasing) multi-index bookkeeping for symmetric tensors."""
from __future__ import annotations

from functools import lru_cache
from itertools import combinations_with_replacement, permutations, product
from math import comb, factorial

import numpy as np


@lru_cache(maxsize=None)
def canonical_indices(n: int, m: int) -> tuple:
    """Non-decreasing index tuples of length m over range(n), lexicographic order."""
    return tuple(combinations_with_replacement(range(n), m))


def n_components(n: int, m: int) -> int:
    return comb(n + m - 1, m)


@lru_cache(maxsize=None)
def _lookup(n: int, m: int) -> dict:
    return {a: i for i, a in enumerate(canonical_indices(n, m))}


def position(index, n: int) -> int:
    """Canonical position of an arbitrary (unsorted) index tuple."""
    return _lookup(n, len(index))[tuple(sorted(index))]


@lru_cache(maxsize=None)
def _multiplicities(n: int, m: int) -> tuple:
    out = []
    for a in canonical_indices(n, m):
        counts = np.bincount(a, minlength=n) if m else np.zeros(n, int)
        d = 1
        for c in counts:
            d *= factorial(int(c))
        out.append(factorial(m) // d)
    return tuple(out)


def multiplicities(n: int, m: int) -> np.ndarray:
    """Number of distinct orderings of each canonical index."""
    return np.array(_multiplicities(n, m), dtype=float)


@lru_cache(maxsize=None)
def _full_map(n: int, m: int) -> np.ndarray:
    """Canonical position of every full index tuple, in C order."""
    lk = _lookup(n, m)
    return np.array([lk[tuple(sorted(t))] for t in product(range(n), repeat=m)], dtype=np.int64)


def to_full(comps: np.ndarray, n: int, m: int) -> np.ndarray:
    """Expand canonical components (..., C) to a full symmetric array (..., n, ..., n)."""
    comps = np.asarray(comps)
    full = comps[..., _full_map(n, m)]
    return full.reshape(comps.shape[:-1] + (n,) * m)


def symmetrize_full(T: np.ndarray, m: int) -> np.ndarray:
    """Average of a full array over all permutations of its last m axes."""
    T = np.asarray(T)
    lead = T.ndim - m
    out = np.zeros_like(T, dtype=np.result_type(T, float))
    perms = list(permutations(range(m)))
    for p in perms:
        out += np.transpose(T, tuple(range(lead)) + tuple(lead + q for q in p))
    return out / len(perms)


def from_full(T: np.ndarray, n: int, m: int) -> np.ndarray:
    """Canonical components of the symmetrization of a full array (..., n, ..., n)."""
    T = np.asarray(T)
    lead = T.shape[: T.ndim - m]
    flat = T.reshape(lead + (n**m,))
    fm = _full_map(n, m)
    C = n_components(n, m)
    out = np.zeros(lead + (C,), dtype=np.result_type(T, float))
    for j in range(n**m):
        out[..., fm[j]] += flat[..., j]
    return out / multiplicities(n, m)


@lru_cache(maxsize=None)
def _index_array(n: int, m: int) -> np.ndarray:
    ci = canonical_indices(n, m)
    return np.array(ci, dtype=np.int64).reshape(len(ci), m)


def monomials(v: np.ndarray, m: int) -> np.ndarray:
    """Products v^{a_1}...v^{a_m} for every canonical index a; v has shape (..., n)."""
    v = np.asarray(v)
    n = v.shape[-1]
    idx = _index_array(n, m)
    out = np.ones(v.shape[:-1] + (len(idx),), dtype=v.dtype)
    for k in range(m):
        out = out * v[..., idx[:, k]]
    return out


def contract(comps: np.ndarray, v: np.ndarray, m: int) -> np.ndarray:
    """<f, v^m> = sum over canonical a of mult_a f_a v^a."""
    n = np.asarray(v).shape[-1]
    return np.sum(np.asarray(comps) * multiplicities(n, m) * monomials(v, m), axis=-1)


@lru_cache(maxsize=None)
def symdiff_table(n: int, m: int) -> tuple:
    """Entries (beta, k, alpha) with (d^s v)_beta = 1/(m+1) sum d_k v_alpha.

    One entry per position p of the output index beta (rank m+1); k = beta[p] and
    alpha = beta with position p removed.
    """
    out = []
    for b, beta in enumerate(canonical_indices(n, m + 1)):
        for p in range(m + 1):
            alpha = beta[:p] + beta[p + 1:]
            out.append((b, beta[p], position(alpha, n)))
    return tuple(out)


@lru_cache(maxsize=None)
def connection_table(n: int, m: int) -> tuple:
    """Entries (alpha, k, r_index, q, alpha2) for the Christoffel part of nabla.

    (nabla v)_{alpha, k} = d_k v_alpha - sum over (r, q) of Gamma^q_{k, alpha_r} v_{alpha2},
    with alpha2 = alpha after replacing position r by q.
    """
    out = []
    for a, alpha in enumerate(canonical_indices(n, m)):
        for r in range(m):
            for q in range(n):
                alpha2 = alpha[:r] + (q,) + alpha[r + 1:]
                for k in range(n):
                    out.append((a, k, alpha[r], q, position(alpha2, n)))
    return tuple(out)
