"""Ground-truth contextual games: entropy-regularized two-player matrix games
and Wardrop traffic routing with context-dependent road capacities.

Both game types expose the same small surface used by dataset generation:
``gradient(x, d)`` (the game gradient, batched), ``constraint``,
``sample_contexts``, ``solve`` (ground-truth equilibria) and
``sample_feasible`` (random feasible actions for VI certificates).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .constraints import MinkowskiSum, SimplexProduct, project_box
from .numerics import RngStream, ShapeError, sample_uniform
from .solvers import (DivergenceError, MinkowskiSplitting, ProjectedGradient, SolverConfig,
                      solve_fixed_point)

ENTROPY_FLOOR = 1e-12
NEG_FLOW_TOL = 1e-10


class DomainError(ValueError):
    """An operator was evaluated outside its domain."""


def _digest(*arrays, **scalars) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    for k in sorted(scalars):
        h.update(f"{k}={scalars[k]!r}".encode())
    return h.hexdigest()[:16]


# -- matrix games --------------------------------------------------------------

@dataclass(frozen=True)
class MatrixGameSpec:
    """Contextual zero-sum matrix game with payoff ``B(d) = M(d) - M(d)^T``.

    ``Wb`` (a*a x context_dim) maps the context linearly to the entries of M.
    """

    a: int
    context_dim: int
    Wb: np.ndarray
    entropy_weight: float = 1.0

    def __post_init__(self):
        if self.Wb.shape != (self.a * self.a, self.context_dim):
            raise ShapeError(f"Wb must be ({self.a * self.a}, {self.context_dim}), got {self.Wb.shape}")

    @classmethod
    def random(cls, a: int, context_dim: int, rng: RngStream, entropy_weight: float = 1.0):
        Wb = sample_uniform(rng, -1.0, 1.0, (a * a, context_dim))
        return cls(a, context_dim, Wb, entropy_weight)


def context_to_payoff(spec: MatrixGameSpec, d) -> np.ndarray:
    """Antisymmetric payoff matrix B(d); ``d`` may carry leading batch axes."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != spec.context_dim:
        raise ShapeError(f"context must have dim {spec.context_dim}, got {d.shape[-1]}")
    M = (d @ spec.Wb.T).reshape(d.shape[:-1] + (spec.a, spec.a))
    return M - np.swapaxes(M, -1, -2)


def matrix_game_gradient(spec: MatrixGameSpec, x, d, floor: float | None = None) -> np.ndarray:
    """Stacked player gradients ``(B^T x2 + w(1 + log x1), -B x1 + w(1 + log x2))``.

    Without ``floor`` every strategy entry must be strictly positive. With
    ``floor`` the logarithm is taken of ``max(x, floor)``.
    """
    x = np.asarray(x, dtype=np.float64)
    a = spec.a
    if x.shape[-1] != 2 * a:
        raise ShapeError(f"strategy profile must have dim {2 * a}, got {x.shape[-1]}")
    if floor is None:
        if np.any(x <= 0):
            raise DomainError("entropy gradient requires strictly positive strategies")
        logx = np.log(x)
    else:
        logx = np.log(np.maximum(x, floor))
    B = context_to_payoff(spec, d)
    x1, x2 = x[..., :a], x[..., a:]
    w = spec.entropy_weight
    g1 = np.einsum("...ji,...j->...i", B, x2) + w * (1.0 + logx[..., :a])
    g2 = -np.einsum("...ij,...j->...i", B, x1) + w * (1.0 + logx[..., a:])
    return np.concatenate([g1, g2], axis=-1)


def player_cost(spec: MatrixGameSpec, x1, x2, d) -> np.ndarray:
    """Player-1 cost ``x2^T B(d) x1 + w sum x1 log x1`` (0 log 0 = 0)."""
    B = context_to_payoff(spec, d)
    x1 = np.asarray(x1, dtype=np.float64)
    ent = np.where(x1 > 0, x1 * np.log(np.where(x1 > 0, x1, 1.0)), 0.0).sum(axis=-1)
    return np.einsum("...i,...ij,...j->...", x2, B, x1) + spec.entropy_weight * ent


class MatrixGame:
    """Two-player entropy-regularized matrix game on Δ^a × Δ^a."""

    kind = "matrix"

    def __init__(self, spec: MatrixGameSpec, context_lo: float = 0.0, context_hi: float = 1.0):
        self.spec = spec
        self.context_lo, self.context_hi = context_lo, context_hi
        self.constraint = SimplexProduct((spec.a, spec.a))

    @property
    def context_dim(self) -> int:
        return self.spec.context_dim

    @property
    def action_dim(self) -> int:
        return 2 * self.spec.a

    def gradient(self, x, d):
        return matrix_game_gradient(self.spec, x, d, floor=ENTROPY_FLOOR)

    def digest(self) -> str:
        return _digest(self.spec.Wb, kind=self.kind, a=self.spec.a, w=self.spec.entropy_weight,
                       lo=self.context_lo, hi=self.context_hi)

    def params(self) -> dict:
        return {"kind": self.kind, "a": self.spec.a, "context_dim": self.spec.context_dim,
                "entropy_weight": self.spec.entropy_weight, "Wb": self.spec.Wb.tolist(),
                "context_range": [self.context_lo, self.context_hi]}

    @classmethod
    def from_params(cls, p: dict) -> "MatrixGame":
        spec = MatrixGameSpec(int(p["a"]), int(p["context_dim"]), np.asarray(p["Wb"], dtype=np.float64),
                              float(p["entropy_weight"]))
        lo, hi = p.get("context_range", [0.0, 1.0])
        return cls(spec, lo, hi)

    def sample_contexts(self, rng: RngStream, n: int) -> np.ndarray:
        return sample_uniform(rng, self.context_lo, self.context_hi, (n, self.context_dim))

    def solve(self, d, tol=1e-10, max_iter=100_000, alpha=None) -> tuple[np.ndarray, object]:
        """Equilibria by projected-gradient iteration started at uniform play."""
        d = np.atleast_2d(d)
        if alpha is None:
            scale = np.abs(context_to_payoff(self.spec, d)).sum(axis=-1).max()
            alpha = 0.5 / (self.spec.entropy_weight * 4.0 + scale)
        op = ProjectedGradient(self.gradient, self.constraint, alpha)
        init = np.full(self.action_dim, 1.0 / self.spec.a)
        trace = solve_fixed_point(op, d, SolverConfig(alpha, tol, max_iter, init),
                                  raise_on_nonconvergence=True)
        return trace.solution, trace

    def sample_feasible(self, rng: RngStream, n: int) -> np.ndarray:
        a = self.spec.a
        g = rng.generator
        return np.concatenate([g.dirichlet(np.ones(a), n), g.dirichlet(np.ones(a), n)], axis=-1)

    def best_response_set(self, g) -> np.ndarray:
        """Vertex of the strategy set minimizing ``<g, y>`` (exact linear minimizer)."""
        a = self.spec.a
        y = np.zeros_like(g)
        rows = np.arange(g.shape[0])
        y[rows, np.argmin(g[:, :a], axis=1)] = 1.0
        y[rows, a + np.argmin(g[:, a:], axis=1)] = 1.0
        return y


# -- traffic games -------------------------------------------------------------

def sample_context_matrix(rows: int, context_dim: int, rng: RngStream) -> np.ndarray:
    """Context mixing matrix: first column on (-10, 0], the rest on [0, 1)."""
    if context_dim < 1:
        raise ValueError("context_dim must be >= 1")
    W = sample_uniform(rng, 0.0, 1.0, (rows, context_dim))
    W[:, 0] *= -10.0
    return W


@dataclass
class RoadNetwork:
    """Directed road network with contextual BPR-style travel times.

    ``incidence`` is |V| x |E| with -1 at each arc's tail and +1 at its head;
    ``demands`` is K x |V| with ``b[origin] = -q`` and ``b[destination] = +q``.
    """

    incidence: np.ndarray
    free_flow: np.ndarray
    base_capacity: np.ndarray
    demands: np.ndarray
    W: np.ndarray
    eps_cap: float
    bpr_coeff: float
    context_dim: int
    name: str = "network"
    od_pairs: list = field(default_factory=list)

    def __post_init__(self):
        N = self.incidence
        nv, ne = N.shape
        if not (np.all((N == 1).sum(axis=0) == 1) and np.all((N == -1).sum(axis=0) == 1)):
            raise ValueError("each incidence column needs exactly one +1 and one -1")
        if self.demands.ndim != 2 or self.demands.shape[1] != nv:
            raise ShapeError(f"demands must be (K, {nv}), got {self.demands.shape}")
        if np.any(np.abs(self.demands.sum(axis=1)) > 1e-9 * (1 + np.abs(self.demands).sum(axis=1))):
            raise ValueError("every demand vector must sum to zero")
        if self.W.shape != (ne, self.context_dim):
            raise ShapeError(f"W must be ({ne}, {self.context_dim}), got {self.W.shape}")
        if not 0 <= self.eps_cap < 1:
            raise ValueError("eps_cap must lie in [0, 1) to keep capacities positive")
        if np.any(self.base_capacity <= 0):
            raise ValueError("base capacities must be positive")

    @property
    def n_edges(self) -> int:
        return self.incidence.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.incidence.shape[0]

    def tails_heads(self):
        return np.argmax(self.incidence == -1, axis=0), np.argmax(self.incidence == 1, axis=0)


def capacity_map(net: RoadNetwork, d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != net.context_dim:
        raise ShapeError(f"context must have dim {net.context_dim}, got {d.shape[-1]}")
    return net.base_capacity * (1.0 + project_box(d @ net.W.T, -net.eps_cap, net.eps_cap))


def traffic_gradient(net: RoadNetwork, x, d, clamp: bool = False) -> np.ndarray:
    """Edge travel times ``f_e (1 + kappa (x_e / c(d)_e)^4)``.

    With ``clamp=True`` negative flows are treated as zero, which keeps the
    operator monotone on the whole space (solver iterates can leave x >= 0).
    """
    x = np.asarray(x, dtype=np.float64)
    if clamp:
        x = np.maximum(x, 0.0)
    elif np.any(x < -NEG_FLOW_TOL):
        raise DomainError("travel times are defined for nonnegative flows only")
    r = x / capacity_map(net, d)
    r2 = r * r
    return net.free_flow * (1.0 + net.bpr_coeff * r2 * r2)


def braess_network(W=None, rng: RngStream | None = None, context_dim: int = 5) -> RoadNetwork:
    """Four-node Braess network with one unit of demand from v1 to v4."""
    N = np.array([[-1, 0, -1, 0, 0],
                  [0, 0, 1, -1, -1],
                  [1, -1, 0, 1, 0],
                  [0, 1, 0, 0, 1]], dtype=np.float64)
    f = np.array([1.0, 2.0, np.sqrt(2.0), np.sqrt(3.0), 1.0])
    c = np.array([0.4, 0.8, 0.8, 0.6, 0.3])
    b = np.array([[-1.0, 0.0, 0.0, 1.0]])
    if W is None:
        W = sample_context_matrix(5, context_dim, rng if rng is not None else RngStream(0, "braess/W"))
    W = np.asarray(W, dtype=np.float64)
    return RoadNetwork(N, f, c, b, W, eps_cap=0.4, bpr_coeff=1.0, context_dim=W.shape[1],
                       name="braess", od_pairs=[(1, 4, 1.0)])


class TrafficGame:
    """Wardrop equilibrium problem over the Minkowski sum of per-OD flow polytopes."""

    kind = "traffic"

    def __init__(self, net: RoadNetwork, context_lo: float = 0.0, context_hi: float = 1.0,
                 solver_alpha: float | None = None):
        self.net = net
        self.context_lo, self.context_hi = context_lo, context_hi
        self.constraint = MinkowskiSum.shared_incidence(net.incidence, net.demands)
        self._solver_alpha = solver_alpha
        tails, heads = net.tails_heads()
        self._tails, self._heads = tails, heads
        self._origins = np.array([int(np.argmax(b < 0)) for b in net.demands])
        self._dests = np.array([int(np.argmax(b > 0)) for b in net.demands])
        self._q = np.array([-b[o] for b, o in zip(net.demands, self._origins)])

    @property
    def context_dim(self) -> int:
        return self.net.context_dim

    @property
    def action_dim(self) -> int:
        return self.net.n_edges

    def gradient(self, x, d):
        return traffic_gradient(self.net, x, d, clamp=True)

    def digest(self) -> str:
        n = self.net
        return _digest(n.incidence, n.free_flow, n.base_capacity, n.demands, n.W, kind=self.kind,
                       eps=n.eps_cap, kappa=n.bpr_coeff, lo=self.context_lo, hi=self.context_hi)

    def params(self) -> dict:
        n = self.net
        return {"kind": self.kind, "name": n.name, "incidence": n.incidence.tolist(),
                "free_flow": n.free_flow.tolist(), "base_capacity": n.base_capacity.tolist(),
                "demands": n.demands.tolist(), "W": n.W.tolist(), "eps_cap": n.eps_cap,
                "bpr_coeff": n.bpr_coeff, "context_dim": n.context_dim,
                "context_range": [self.context_lo, self.context_hi], "solver_alpha": self._solver_alpha}

    @classmethod
    def from_params(cls, p: dict) -> "TrafficGame":
        arr = lambda k: np.asarray(p[k], dtype=np.float64)  # noqa: E731
        net = RoadNetwork(arr("incidence"), arr("free_flow"), arr("base_capacity"), arr("demands"),
                          arr("W"), float(p["eps_cap"]), float(p["bpr_coeff"]), int(p["context_dim"]),
                          name=p.get("name", "network"))
        lo, hi = p.get("context_range", [0.0, 1.0])
        return cls(net, lo, hi, p.get("solver_alpha"))

    def sample_contexts(self, rng: RngStream, n: int) -> np.ndarray:
        return sample_uniform(rng, self.context_lo, self.context_hi, (n, self.context_dim))

    def default_alpha(self) -> float:
        """Step size ~ 1/(K L) with L the largest travel-time slope at full demand."""
        if self._solver_alpha is not None:
            return self._solver_alpha
        net = self.net
        cmin = net.base_capacity * (1.0 - net.eps_cap)
        xmax = np.minimum(self._q.sum(), 2.0 * cmin)
        L = np.max(4.0 * net.bpr_coeff * net.free_flow * xmax ** 3 / cmin ** 4)
        return float(1.0 / (self.constraint.K * L))

    def solve(self, d, tol=1e-10, max_iter=100_000, alpha=None, init=None):
        """Equilibrium flows via the Minkowski-sum splitting.

        Returns ``(x, blocks, trace)``: summed edge flow, per-OD flows
        (nonnegative, satisfying N x_k = b_k) and the solver trace.
        """
        d = np.atleast_2d(d)
        alpha = self.default_alpha() if alpha is None else alpha
        op = MinkowskiSplitting(self.gradient, self.constraint, alpha)
        trace = solve_fixed_point(op, d, SolverConfig(alpha, tol, max_iter, init),
                                  raise_on_nonconvergence=True)
        blocks = self.constraint.project_affine_blocks(trace.state)
        return trace.solution, blocks, trace

    # -- feasible points ---------------------------------------------------------

    def _shortest_path_flows(self, costs) -> np.ndarray:
        """All-or-nothing flows routing each OD demand on a cheapest path."""
        net = self.net
        nv = net.n_nodes
        tails, heads = self._tails, self._heads
        G = csr_matrix((np.maximum(costs, 1e-12), (tails, heads)), shape=(nv, nv))
        origins = np.unique(self._origins)
        dist, pred = dijkstra(G, directed=True, indices=origins, return_predecessors=True)
        row = {o: i for i, o in enumerate(origins)}
        edge_of = {(int(t), int(h)): e for e, (t, h) in enumerate(zip(tails, heads))}
        # parallel arcs: keep the cheapest
        for e, (t, h) in enumerate(zip(tails, heads)):
            e0 = edge_of[(int(t), int(h))]
            if costs[e] < costs[e0]:
                edge_of[(int(t), int(h))] = e
        x = np.zeros(net.n_edges)
        for o, dst, q in zip(self._origins, self._dests, self._q):
            p = pred[row[o]]
            v = dst
            while v != o:
                u = p[v]
                if u < 0:
                    raise ValueError(f"destination {dst + 1} unreachable from {o + 1}")
                x[edge_of[(int(u), int(v))]] += q
                v = u
        return x

    def best_response_set(self, g) -> np.ndarray:
        """All-or-nothing assignment minimizing ``<g, y>`` over feasible flows."""
        return np.stack([self._shortest_path_flows(gi) for gi in np.atleast_2d(g)])

    def sample_feasible(self, rng: RngStream, n: int, paths_per_sample: int = 3) -> np.ndarray:
        """Random feasible flows: convex mixtures of randomly-weighted shortest paths."""
        g = rng.generator
        out = np.empty((n, self.net.n_edges))
        for i in range(n):
            w = g.dirichlet(np.ones(paths_per_sample))
            out[i] = sum(wj * self._shortest_path_flows(self.net.free_flow * g.uniform(0.1, 10.0, self.net.n_edges))
                         for wj in w)
        return out


def vi_certificate(game, x, d, y) -> np.ndarray:
    """Normalized VI residuals ``<F(x;d), y - x> / (1 + ||F|| ||y - x||)``.

    ``x`` is (n,), ``d`` is (m,), ``y`` is a (S, n) stack of feasible points.
    A solution of the VI has all entries >= 0 (up to solver tolerance).
    """
    Fx = game.gradient(np.atleast_2d(x), np.atleast_2d(d))[0]
    diff = np.atleast_2d(y) - x
    return (diff @ Fx) / (1.0 + np.linalg.norm(Fx) * np.linalg.norm(diff, axis=1))
