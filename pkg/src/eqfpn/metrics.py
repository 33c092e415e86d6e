"""Prediction quality scores and repeated-play simulation for matrix games."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .games import MatrixGameSpec, context_to_payoff
from .numerics import RngStream, ShapeError, sample_uniform


@dataclass(frozen=True)
class TrafixParams:
    """Relative-error threshold ``eps`` and denominator tolerance ``tau``."""

    eps: float = 5e-3
    tau: float = 1e-3

    def __post_init__(self):
        if not (self.eps > 0 and self.tau > 0):
            raise ValueError(f"TRAFIX parameters must be positive, got eps={self.eps}, tau={self.tau}")


def trafix(x, x_star, p: TrafixParams = TrafixParams()) -> float:
    """Percentage of edges whose relative flow error is below ``p.eps``."""
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_star.shape}")
    rel = np.abs(x - x_star) / (np.abs(x_star) + p.tau)
    return 100.0 * np.count_nonzero(rel < p.eps) / x.size


def rel_mse(x, x_star) -> float:
    """``||x - x*||^2 / ||x*||^2``."""
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_star.shape}")
    denom = float(np.dot(x_star.ravel(), x_star.ravel()))
    if denom == 0.0:
        raise ValueError("relative MSE is undefined for a zero reference")
    diff = (x - x_star).ravel()
    return float(np.dot(diff, diff)) / denom


# -- repeated play ----------------------------------------------------------------

@dataclass
class PlayTrace:
    """Running statistic ``y[k-1]`` = mean over contexts of |average player-1 cost after k games|.

    ``signed`` holds the same average without the absolute value.
    """

    k_max: int
    y: np.ndarray
    policy_label: str
    signed: np.ndarray | None = None

    def __post_init__(self):
        if len(self.y) != self.k_max:
            raise ValueError("y must have one entry per game")


class ConfigurationError(ValueError):
    pass


def regularized_best_response(spec: MatrixGameSpec, B, x2) -> np.ndarray:
    """Player-1 minimizer of ``x2^T B x1 + w sum x1 log x1`` over the simplex (a softmax)."""
    s = -np.einsum("...ji,...j->...i", B, x2) / spec.entropy_weight
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def simulate_play(spec: MatrixGameSpec, equilibrium, policy2: str, n_games: int, n_contexts: int,
                  rng: RngStream, model_predict=None, context_lo: float = 0.0, context_hi: float = 1.0) -> PlayTrace:
    """Simulate ``n_games`` rounds of one-hot play in ``n_contexts`` random contexts.

    ``equilibrium(d)`` returns exact equilibrium profiles (n, 2a). Player 2
    plays the equilibrium strategy (``"optimal"``), the model's predicted
    strategy (``"nfpn"``, via ``model_predict(d)``), or uniform play
    (``"uniform"``). Player 1 knows B(d) and player 2's mixed strategy and
    plays its regularized best response; against an equilibrium opponent this
    is exactly the equilibrium strategy. Each game samples one-hot actions
    from both mixed strategies; the realized player-1 cost is ``s2^T B s1``.
    """
    if policy2 not in ("optimal", "nfpn", "uniform"):
        raise ConfigurationError(f"unknown policy {policy2!r}")
    if policy2 == "nfpn" and model_predict is None:
        raise ConfigurationError("policy 'nfpn' needs a trained model")
    a = spec.a
    d = sample_uniform(rng.child("contexts"), context_lo, context_hi, (n_contexts, spec.context_dim))
    B = context_to_payoff(spec, d)
    x_eq = np.asarray(equilibrium(d))
    if policy2 == "optimal":
        x1, x2 = x_eq[:, :a], x_eq[:, a:]
    else:
        if policy2 == "uniform":
            x2 = np.full((n_contexts, a), 1.0 / a)
        else:
            x2 = np.clip(np.asarray(model_predict(d))[:, a:], 0.0, None)
            x2 = x2 / x2.sum(axis=1, keepdims=True)
        x1 = regularized_best_response(spec, B, x2)
    g = rng.child("play").generator
    # inverse-CDF sampling of one action per game and context
    u1 = g.random((n_games, n_contexts))
    u2 = g.random((n_games, n_contexts))
    s1 = np.minimum((u1[..., None] > np.cumsum(x1, axis=1)).sum(axis=-1), a - 1)
    s2 = np.minimum((u2[..., None] > np.cumsum(x2, axis=1)).sum(axis=-1), a - 1)
    ctx = np.arange(n_contexts)
    costs = B[ctx[None, :], s2, s1]
    running = np.cumsum(costs, axis=0) / np.arange(1, n_games + 1)[:, None]
    y = np.abs(running).mean(axis=1)
    return PlayTrace(n_games, y, policy2, running.mean(axis=1))
