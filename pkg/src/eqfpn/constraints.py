"""Constraint sets, their Euclidean projections, and projection Jacobians.

Every projection acts on the last axis and broadcasts over leading (batch)
axes. Product-space states used by the decoupled solvers are arrays of shape
``(..., K, n)``: K blocks, each living in the ambient space R^n.

Projection Jacobians are symmetric wherever they exist, so ``jvp`` doubles as
the vector-Jacobian product used in backpropagation. At active-set
boundaries (measure zero) the branch that keeps the boundary component free
is used.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .numerics import PinvFactor, ShapeError, pinv_apply, pinv_factor


class ConstraintError(ValueError):
    """Constraint data are inconsistent (e.g. an empty affine set)."""


def _as_float(z) -> np.ndarray:
    return np.asarray(z, dtype=np.float64)


def project_orthant(z) -> np.ndarray:
    return np.maximum(_as_float(z), 0.0)


def project_box(z, lo: float, hi: float) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"invalid box: lo={lo} > hi={hi}")
    return np.clip(_as_float(z), lo, hi)


def _simplex(z):
    z = _as_float(z)
    flat = z.reshape(-1, z.shape[-1])
    x, theta = kernels.project_simplex_rows(flat)
    return x.reshape(z.shape), theta.reshape(z.shape[:-1])


def project_simplex(z) -> np.ndarray:
    """Nearest point of the probability simplex (sort-and-threshold)."""
    z = _as_float(z)
    if z.shape[-1] < 1:
        raise ShapeError("simplex dimension must be >= 1")
    return _simplex(z)[0]


class ConvexSet:
    """Base class: a closed convex subset of R^dim with a cheap projection."""

    dim: int

    def project(self, z) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, point, tangent) -> np.ndarray:
        """Jacobian of ``project`` at ``point`` applied to ``tangent``."""
        raise NotImplementedError

    def contains(self, x, atol: float = 1e-9) -> bool:
        x = _as_float(x)
        return bool(np.all(np.abs(self.project(x) - x) <= atol * (1 + np.abs(x))))

    def _check(self, z):
        z = _as_float(z)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"{type(self).__name__} expects last dim {self.dim}, got {z.shape[-1]}")
        return z


class WholeSpace(ConvexSet):
    def __init__(self, dim: int):
        self.dim = dim

    def project(self, z):
        return self._check(z).copy()

    def jvp(self, point, tangent):
        return _as_float(tangent).copy()


class Orthant(ConvexSet):
    def __init__(self, dim: int):
        self.dim = dim

    def project(self, z):
        return project_orthant(self._check(z))

    def jvp(self, point, tangent):
        return np.where(_as_float(point) >= 0.0, tangent, 0.0)


class Box(ConvexSet):
    def __init__(self, dim: int, lo: float, hi: float):
        if lo > hi:
            raise ValueError(f"invalid box: lo={lo} > hi={hi}")
        self.dim, self.lo, self.hi = dim, float(lo), float(hi)

    def project(self, z):
        return project_box(self._check(z), self.lo, self.hi)

    def jvp(self, point, tangent):
        p = _as_float(point)
        return np.where((p >= self.lo) & (p <= self.hi), tangent, 0.0)


class Simplex(ConvexSet):
    """Probability simplex {x >= 0, sum x = 1}."""

    def __init__(self, dim: int):
        self.dim = dim

    def project(self, z):
        return project_simplex(self._check(z))

    def jvp(self, point, tangent):
        p = self._check(point)
        tangent = _as_float(tangent)
        _, theta = _simplex(p)
        support = (p - theta[..., None]) >= 0.0
        t = np.where(support, tangent, 0.0)
        mean = t.sum(axis=-1, keepdims=True) / support.sum(axis=-1, keepdims=True)
        return np.where(support, t - mean, 0.0)


class SimplexProduct(ConvexSet):
    """Cartesian product of probability simplices with the given block sizes."""

    def __init__(self, block_sizes):
        self.block_sizes = tuple(int(s) for s in block_sizes)
        if not self.block_sizes or min(self.block_sizes) < 1:
            raise ConstraintError("simplex blocks must be nonempty")
        self.dim = sum(self.block_sizes)
        self._edges = np.cumsum((0,) + self.block_sizes)

    def _blocks(self, z):
        return [slice(self._edges[i], self._edges[i + 1]) for i in range(len(self.block_sizes))]

    def project(self, z):
        z = self._check(z)
        if len(set(self.block_sizes)) == 1:
            a = self.block_sizes[0]
            shaped = z.reshape(z.shape[:-1] + (len(self.block_sizes), a))
            return project_simplex(shaped).reshape(z.shape)
        out = np.empty_like(z)
        for s in self._blocks(z):
            out[..., s] = project_simplex(z[..., s])
        return out

    def jvp(self, point, tangent):
        point = self._check(point)
        tangent = _as_float(tangent)
        out = np.empty(np.broadcast_shapes(point.shape, tangent.shape))
        for s, size in zip(self._blocks(point), self.block_sizes):
            out[..., s] = Simplex(size).jvp(point[..., s], tangent[..., s])
        return out


class AffineSet(ConvexSet):
    """The affine set {x : N x = b}; projection ``z - N^+(N z - b)``.

    Feasibility (b in range(N)) is checked once at construction.
    """

    def __init__(self, N, b, pinv: PinvFactor | None = None):
        self.N = _as_float(N)
        self.b = _as_float(b)
        if self.N.ndim != 2 or self.b.shape != (self.N.shape[0],):
            raise ShapeError(f"incompatible N {self.N.shape} and b {self.b.shape}")
        self.dim = self.N.shape[1]
        self.pinv = pinv if pinv is not None else pinv_factor(self.N)
        self.particular = pinv_apply(self.pinv, self.b)
        gap = np.linalg.norm(self.N @ self.particular - self.b)
        if gap > 1e-8 * (1.0 + np.linalg.norm(self.b)):
            raise ConstraintError(f"affine set is empty: ||N x_p - b|| = {gap:.3e}")

    def project(self, z):
        z = self._check(z)
        return z - pinv_apply(self.pinv, z @ self.N.T - self.b)

    def jvp(self, point, tangent):
        t = _as_float(tangent)
        V = self.pinv.V
        return t - (t @ V) @ V.T


def project_affine(z, A: AffineSet) -> np.ndarray:
    return A.project(z)


class AffineOrthant:
    """{x : N x = b, x >= 0}, split into an affine part and the orthant."""

    def __init__(self, affine: AffineSet):
        self.affine = affine
        self.orthant = Orthant(affine.dim)
        self.dim = affine.dim

    @classmethod
    def from_data(cls, N, b):
        return cls(AffineSet(N, b))

    @property
    def parts(self):
        return self.affine, self.orthant


class MinkowskiSum:
    """Sum C_1 + ... + C_K of sets C_k = {N_k x = b_k} ∩ {x >= 0}.

    When every block shares the same matrix N the pseudoinverse is factored
    once and block projections are vectorized over K.
    """

    def __init__(self, blocks):
        self.blocks = list(blocks)
        if not self.blocks:
            raise ConstraintError("Minkowski sum needs at least one block")
        self.dim = self.blocks[0].dim
        if any(blk.dim != self.dim for blk in self.blocks):
            raise ShapeError("all Minkowski blocks must share the ambient dimension")
        N0 = self.blocks[0].affine.N
        self.shared = all(blk.affine.N is N0 or np.array_equal(blk.affine.N, N0) for blk in self.blocks)
        if self.shared:
            self._V = self.blocks[0].affine.pinv.V
            self._particular = np.stack([blk.affine.particular for blk in self.blocks])

    @classmethod
    def shared_incidence(cls, N, demands):
        """Build from one matrix N and a (K, m) array of right-hand sides."""
        N = _as_float(N)
        P = pinv_factor(N)
        return cls([AffineOrthant(AffineSet(N, b, pinv=P)) for b in _as_float(demands)])

    @property
    def K(self) -> int:
        return len(self.blocks)

    def project_affine_blocks(self, zbar):
        """Block-wise projection onto the affine parts; ``zbar`` is (..., K, n)."""
        zbar = _as_float(zbar)
        if zbar.shape[-2:] != (self.K, self.dim):
            raise ShapeError(f"expected (..., {self.K}, {self.dim}) blocks, got {zbar.shape}")
        if self.shared:
            V = self._V
            return zbar - (zbar @ V) @ V.T + self._particular
        return np.stack([blk.affine.project(zbar[..., k, :]) for k, blk in enumerate(self.blocks)], axis=-2)

    def affine_jvp_blocks(self, tangent):
        tangent = _as_float(tangent)
        if self.shared:
            V = self._V
            return tangent - (tangent @ V) @ V.T
        return np.stack([blk.affine.jvp(None, tangent[..., k, :]) for k, blk in enumerate(self.blocks)], axis=-2)


class IntersectionList:
    """Intersection C_1 ∩ ... ∩ C_K of sets with individual projections."""

    def __init__(self, sets):
        self.sets = list(sets)
        if not self.sets:
            raise ConstraintError("intersection needs at least one set")
        self.dim = self.sets[0].dim
        if any(s.dim != self.dim for s in self.sets):
            raise ShapeError("all intersected sets must share the ambient dimension")

    @property
    def K(self) -> int:
        return len(self.sets)

    def project_blocks(self, zbar):
        zbar = _as_float(zbar)
        return np.stack([s.project(zbar[..., k, :]) for k, s in enumerate(self.sets)], axis=-2)

    def jvp_blocks(self, zbar, tangent):
        return np.stack([s.jvp(zbar[..., k, :], tangent[..., k, :]) for k, s in enumerate(self.sets)], axis=-2)


def project_consensus(xbar) -> np.ndarray:
    """Projection onto {x_1 = ... = x_K}: every block becomes the block mean."""
    xbar = _as_float(xbar)
    return np.broadcast_to(xbar.mean(axis=-2, keepdims=True), xbar.shape).copy()


def lift(x, K: int) -> np.ndarray:
    """K stacked copies of ``x`` along a new block axis."""
    x = _as_float(x)
    return np.repeat(x[..., None, :], K, axis=-2)


def lower(xbar) -> np.ndarray:
    """Sum of the blocks of a product-space state."""
    return _as_float(xbar).sum(axis=-2)


def projection_jvp(kind, point, tangent) -> np.ndarray:
    """Jacobian-vector product of the projection onto ``kind`` at ``point``.

    ``kind`` is a :class:`ConvexSet` instance, or one of the strings
    ``"orthant"`` / ``"whole"`` for the parameter-free sets.
    """
    if isinstance(kind, ConvexSet):
        return kind.jvp(point, tangent)
    point = _as_float(point)
    if kind == "orthant":
        return Orthant(point.shape[-1]).jvp(point, tangent)
    if kind == "whole":
        return _as_float(tangent).copy()
    raise NotImplementedError(f"no projection Jacobian for {kind!r}")
