"""Fixed-point operators whose fixed points encode VI solutions, and the
Krasnosel'skii-Mann loop that iterates them.

Operators take a game operator ``F(x, d) -> array`` evaluated on batches:
``x`` has shape (B, n) and ``d`` shape (B, m). Unbatched 1-D inputs work too
as long as ``F`` broadcasts.

Four splittings are provided:

* :class:`ProjectedGradient` - ``x <- P_C(x - alpha F(x; d))``;
* :class:`ThreeOperator` - Davis-Yin splitting with two projections;
* :class:`MinkowskiSplitting` - product-space lifting for C = C_1 + ... + C_K;
* :class:`IntersectionSplitting` - consensus lifting for C = C_1 ∩ ... ∩ C_K.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .constraints import AffineOrthant, ConvexSet, IntersectionList, MinkowskiSum, SimplexProduct, WholeSpace


class ConfigurationError(ValueError):
    """Solver/constraint combination that cannot be used."""


class DivergenceError(ArithmeticError):
    """An iterate became NaN or infinite."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class SolverConfig:
    """Step size, stopping tolerance and iteration cap for a fixed-point solve.

    ``init`` is ``None`` (zero initial state) or an explicit initial state.
    """

    alpha: float = 1.0
    tol: float = 1e-4
    max_depth: int = 50
    init: np.ndarray | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if not self.tol > 0:
            raise ConfigurationError(f"tol must be positive, got {self.tol}")
        if self.max_depth < 1:
            raise ConfigurationError(f"max_depth must be >= 1, got {self.max_depth}")


@dataclass
class SolveTrace:
    iterations: int
    residuals: list
    converged: bool
    solution: np.ndarray
    state: np.ndarray = field(repr=False)
    sample_residuals: np.ndarray | None = field(default=None, repr=False)


# -- single applications ------------------------------------------------------

def apply_T_pg(x, d, F, C, alpha: float = 1.0):
    """One projected-gradient step ``P_C(x - alpha F(x; d))``."""
    if not isinstance(C, ConvexSet):
        raise ConfigurationError(f"projected gradient needs a directly projectable set, got {type(C).__name__}")
    return C.project(x - alpha * F(x, d))


def apply_T_dys(z, d, F, C1, C2, alpha: float = 1.0):
    """One three-operator-splitting step; returns ``(z_next, x)`` with ``x = P_C1(z)``."""
    x = C1.project(z)
    y = C2.project(2.0 * x - z - alpha * F(x, d))
    return z - x + y, x


def apply_T_minkowski(zbar, d, F, spec: MinkowskiSum, alpha: float = 1.0):
    """One step of the lifted splitting for a Minkowski sum.

    ``zbar`` is (B, K, n). ``F`` is evaluated once, at ``v = sum_k P_{C_k^1}(zbar_k)``.
    Returns ``(zbar_next, v)``.
    """
    zbar, squeeze = _batched_blocks(zbar, spec)
    d = np.atleast_2d(d) if squeeze else d
    x = spec.project_affine_blocks(zbar)
    v = x.sum(axis=-2)
    g = F(v, d)
    if spec.shared:
        znext, _ = kernels.minkowski_orthant_step(zbar, x, np.atleast_2d(g), float(alpha))
    else:
        y = np.maximum(2.0 * x - zbar - alpha * g[..., None, :], 0.0)
        znext = zbar - x + y
    if squeeze:
        return znext[0], v[0]
    return znext, v


def apply_T_intersection(zbar, d, F, spec: IntersectionList, alpha: float = 1.0):
    """One step of the consensus splitting for an intersection.

    Returns ``(zbar_next, x1)`` where ``x1 = P_{C_1}(zbar_1)`` is the candidate solution.
    """
    zbar = np.asarray(zbar, dtype=np.float64)
    x = spec.project_blocks(zbar)
    K = spec.K
    g = np.stack([F(x[..., k, :], d) for k in range(K)], axis=-2)
    v = (2.0 * x - zbar - alpha * g).mean(axis=-2, keepdims=True)
    return zbar - x + v, x[..., 0, :]


def _batched_blocks(zbar, spec):
    zbar = np.asarray(zbar, dtype=np.float64)
    if zbar.ndim == 2:
        return zbar[None], True
    return zbar, False


# -- operator objects used by the solve loop ---------------------------------

class Splitting:
    """A fixed-point operator bound to a game operator and a constraint."""

    def __init__(self, F, alpha: float = 1.0):
        self.F = F
        self.alpha = float(alpha)

    def init_state(self, batch: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, z, d):
        """Return ``(z_next, x)`` where ``x`` is the output map evaluated at ``z``."""
        raise NotImplementedError

    def output(self, z) -> np.ndarray:
        raise NotImplementedError

    def residual(self, z_new, z_old) -> np.ndarray:
        diff = (z_new - z_old).reshape(len(z_new), -1)
        return np.sqrt(np.einsum("bi,bi->b", diff, diff))


class ProjectedGradient(Splitting):
    def __init__(self, F, C: ConvexSet, alpha: float = 1.0):
        if not isinstance(C, ConvexSet):
            raise ConfigurationError(f"projected gradient needs a directly projectable set, got {type(C).__name__}")
        super().__init__(F, alpha)
        self.C = C

    def init_state(self, batch):
        return np.zeros((batch, self.C.dim))

    def step(self, z, d):
        return apply_T_pg(z, d, self.F, self.C, self.alpha), z

    def output(self, z):
        return z


class ThreeOperator(Splitting):
    """Davis-Yin splitting with ``x = P_C1(z)``, ``y = P_C2(2x - z - alpha F(x))``."""

    def __init__(self, F, C1: ConvexSet, C2: ConvexSet, alpha: float = 1.0):
        super().__init__(F, alpha)
        self.C1, self.C2 = C1, C2

    @classmethod
    def for_constraint(cls, F, C, alpha=1.0):
        if isinstance(C, AffineOrthant):
            return cls(F, C.affine, C.orthant, alpha)
        if isinstance(C, ConvexSet):
            return cls(F, WholeSpace(C.dim), C, alpha)
        raise ConfigurationError(f"cannot split {type(C).__name__} into two sets")

    def init_state(self, batch):
        return np.zeros((batch, self.C1.dim))

    def step(self, z, d):
        return apply_T_dys(z, d, self.F, self.C1, self.C2, self.alpha)

    def output(self, z):
        return self.C1.project(z)


class MinkowskiSplitting(Splitting):
    def __init__(self, F, spec: MinkowskiSum, alpha: float = 1.0):
        super().__init__(F, alpha)
        self.spec = spec

    def init_state(self, batch):
        return np.zeros((batch, self.spec.K, self.spec.dim))

    def step(self, z, d):
        return apply_T_minkowski(z, d, self.F, self.spec, self.alpha)

    def output(self, z):
        return self.spec.project_affine_blocks(z).sum(axis=-2)

    def residual(self, z_new, z_old):
        diff = z_new - z_old
        return np.sqrt(np.einsum("bkn,bkn->bk", diff, diff)).sum(axis=1)


class IntersectionSplitting(Splitting):
    def __init__(self, F, spec: IntersectionList, alpha: float = 1.0):
        super().__init__(F, alpha)
        self.spec = spec

    def init_state(self, batch):
        return np.zeros((batch, self.spec.K, self.spec.dim))

    def step(self, z, d):
        return apply_T_intersection(z, d, self.F, self.spec, self.alpha)

    def output(self, z):
        return self.spec.sets[0].project(z[..., 0, :])

    def residual(self, z_new, z_old):
        diff = z_new - z_old
        return np.sqrt(np.einsum("bkn,bkn->bk", diff, diff)).sum(axis=1)


def make_splitting(F, C, alpha: float = 1.0) -> Splitting:
    """Pick the splitting that matches the constraint's structure."""
    if isinstance(C, MinkowskiSum):
        return MinkowskiSplitting(F, C, alpha)
    if isinstance(C, IntersectionList):
        return IntersectionSplitting(F, C, alpha)
    if isinstance(C, AffineOrthant):
        return ThreeOperator(F, C.affine, C.orthant, alpha)
    if isinstance(C, (SimplexProduct, ConvexSet)):
        return ProjectedGradient(F, C, alpha)
    raise ConfigurationError(f"unsupported constraint {type(C).__name__}")


def solve_fixed_point(op: Splitting, d, config: SolverConfig, *, raise_on_nonconvergence=False) -> SolveTrace:
    """Iterate ``z <- T(z)`` on a batch of contexts until every residual is below tol.

    ``d`` has shape (B, m). The loop stops once all per-sample residuals are
    ``<= config.tol`` or after ``config.max_depth`` applications. The trace
    stores the largest per-sample residual of each iteration.
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    batch = d.shape[0]
    if config.init is None:
        z = op.init_state(batch)
    else:
        z = np.array(np.broadcast_to(config.init, op.init_state(batch).shape), dtype=np.float64)
    residuals = []
    res = np.full(batch, np.inf)
    converged = False
    for it in range(1, config.max_depth + 1):
        z_new, _ = op.step(z, d)
        res = op.residual(z_new, z)
        z = z_new
        worst = float(res.max()) if res.size else 0.0
        residuals.append(worst)
        if not np.isfinite(worst):
            trace = SolveTrace(it, residuals, False, op.output(z), z, res)
            raise DivergenceError(f"non-finite iterate at iteration {it}", trace)
        if worst <= config.tol:
            converged = True
            break
    trace = SolveTrace(len(residuals), residuals, converged, op.output(z), z, res)
    if raise_on_nonconvergence and not converged:
        raise DivergenceError(
            f"no convergence after {config.max_depth} iterations (residual {residuals[-1]:.3e})", trace)
    return trace
