"""Regular Cartesian grids, trapezoidal volume weights and multilinear stencils."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np
import scipy.sparse as sp

from ._validation import check_points
from .errors import OutOfDomainError, ValidationError


@dataclass(frozen=True)
class Grid:
    """Uniform node grid on the box ``[lower, upper]`` with ``shape`` nodes per axis.

    Nodes are flattened in C order, so the last axis varies fastest.
    """

    lower: tuple
    upper: tuple
    shape: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        sh = tuple(int(v) for v in self.shape)
        if not (len(lo) == len(hi) == len(sh)):
            raise ValidationError("lower, upper and shape must have equal length")
        if any(s < 2 for s in sh):
            raise ValidationError("every axis needs at least 2 nodes")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValidationError("upper must exceed lower on every axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "shape", sh)

    @classmethod
    def cube(cls, n_nodes: int, dim: int = 3, half_width: float = 1.0, center=None):
        c = np.zeros(dim) if center is None else np.asarray(center, float)
        return cls(tuple(c - half_width), tuple(c + half_width), (n_nodes,) * dim)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.shape) - 1)

    def axes(self):
        return [np.linspace(a, b, s) for a, b, s in zip(self.lower, self.upper, self.shape)]

    @cached_property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def volume_weights(self) -> np.ndarray:
        """Tensor-product trapezoidal weights, flattened."""
        w = np.ones(1)
        for s, h in zip(self.shape, self.spacing):
            w1 = np.full(s, h)
            w1[[0, -1]] = h / 2
            w = np.multiply.outer(w, w1).ravel()
        return w

    @cached_property
    def edge_mask(self) -> np.ndarray:
        """True on nodes lying on the outer face of the box."""
        idx = np.indices(self.shape).reshape(self.dim, -1)
        mask = np.zeros(self.n_nodes, bool)
        for k, s in enumerate(self.shape):
            mask |= (idx[k] == 0) | (idx[k] == s - 1)
        return mask

    def refine(self, factor: int = 2) -> "Grid":
        """Grid on the same box with the spacing divided by ``factor``."""
        return Grid(self.lower, self.upper, tuple((s - 1) * factor + 1 for s in self.shape))

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        p = check_points(points, self.dim)
        eps = tol * self.spacing
        return np.all((p >= np.array(self.lower) - eps) & (p <= np.array(self.upper) + eps), axis=1)

    def stencil(self, points, tol: float = 1e-9):
        """Multilinear interpolation stencil.

        Returns ``(nodes, weights)`` of shape (P, 2**dim); node indices are flat.
        Raises OutOfDomainError if any point is outside the box.
        """
        p = check_points(points, self.dim)
        if not np.all(self.contains(p, tol)):
            bad = np.flatnonzero(~self.contains(p, tol))[:5]
            raise OutOfDomainError(f"points outside grid box, e.g. {p[bad].tolist()}")
        s = (p - np.array(self.lower)) / self.spacing
        hi = np.array(self.shape) - 2
        i0 = np.clip(np.floor(s).astype(np.int64), 0, hi)
        t = np.clip(s - i0, 0.0, 1.0)
        strides = np.array([int(np.prod(self.shape[k + 1:])) for k in range(self.dim)], dtype=np.int64)
        base = i0 @ strides
        corners = np.array(list(product((0, 1), repeat=self.dim)), dtype=np.int64)
        nodes = base[:, None] + (corners @ strides)[None, :]
        w = np.ones((p.shape[0], len(corners)))
        for k in range(self.dim):
            w *= np.where(corners[None, :, k] == 1, t[:, k:k + 1], 1.0 - t[:, k:k + 1])
        return nodes, w

    def interpolate(self, values, points) -> np.ndarray:
        """Multilinear interpolation of node values of shape (N, ...) at points."""
        nodes, w = self.stencil(points)
        vals = np.asarray(values).reshape(self.n_nodes, -1)
        out = np.einsum("pc,pcq->pq", w, vals[nodes])
        return out.reshape((len(w),) + np.asarray(values).shape[1:])

    def interpolation_matrix(self, points) -> sp.csr_matrix:
        nodes, w = self.stencil(points)
        rows = np.repeat(np.arange(len(w)), w.shape[1])
        return sp.csr_matrix((w.ravel(), (rows, nodes.ravel())), shape=(len(w), self.n_nodes))

    def diff_matrix(self, axis: int) -> sp.csr_matrix:
        """Second-order first-derivative matrix along ``axis``.

        Central differences inside, one-sided second-order stencils on the two end nodes.
        """
        s = self.shape[axis]
        h = self.spacing[axis]
        d = sp.lil_matrix((s, s))
        for i in range(1, s - 1):
            d[i, i - 1] = -0.5 / h
            d[i, i + 1] = 0.5 / h
        if s >= 3:
            d[0, :3] = np.array([-1.5, 2.0, -0.5]) / h
            d[s - 1, s - 3:] = np.array([0.5, -2.0, 1.5]) / h
        else:
            d[0, :2] = np.array([-1.0, 1.0]) / h
            d[1, :2] = np.array([-1.0, 1.0]) / h
        mats = [sp.identity(n, format="csr") for n in self.shape]
        mats[axis] = d.tocsr()
        out = mats[0]
        for m in mats[1:]:
            out = sp.kron(out, m, format="csr")
        return out.tocsr()
