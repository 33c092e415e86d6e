"""Dense linear algebra helpers and seeded random streams.

Every real in the package is float64. Random draws go through
:class:`RngStream`, a Philox (counter-based) generator keyed by an integer
seed and a string stream label, so that a given ``(seed, stream_id)`` pair
produces the same sequence on every platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

#: Singular values below ``SVD_RTOL * sigma_max`` are treated as zero.
SVD_RTOL = 1e-10


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


@dataclass(frozen=True)
class PinvFactor:
    """Thresholded compact SVD ``M = U diag(sigma) V^T`` stored for pseudoinverse use."""

    U: np.ndarray
    sigma_inv: np.ndarray
    V: np.ndarray
    threshold_used: float

    @property
    def rank(self) -> int:
        return self.sigma_inv.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the factored matrix (rows, cols)."""
        return self.U.shape[0], self.V.shape[0]

    def dense(self) -> np.ndarray:
        """Return the explicit pseudoinverse ``V diag(sigma_inv) U^T``."""
        return (self.V * self.sigma_inv) @ self.U.T


def _check_finite(M: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{what} contains non-finite entries")


def svd_compact(M, rtol: float = SVD_RTOL):
    """Compact SVD with tiny singular values dropped.

    Returns ``(U, sigma, V)`` with ``U`` (m x r), ``sigma`` (r,) nonincreasing,
    ``V`` (n x r), where r counts singular values ``>= rtol * sigma_max``.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {M.shape}")
    _check_finite(M, "matrix")
    if M.size == 0:
        return np.zeros((M.shape[0], 0)), np.zeros(0), np.zeros((M.shape[1], 0))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        r = 0
    else:
        r = int(np.count_nonzero(s >= rtol * s[0]))
    return U[:, :r].copy(), s[:r].copy(), Vt[:r].T.copy()


def pinv_factor(M, rtol: float = SVD_RTOL) -> PinvFactor:
    U, s, V = svd_compact(M, rtol)
    threshold = rtol * s[0] if s.size else 0.0
    return PinvFactor(U=U, sigma_inv=1.0 / s, V=V, threshold_used=float(threshold))


def pinv_apply(P: PinvFactor, y) -> np.ndarray:
    """Apply the pseudoinverse to ``y`` (last axis of length rows(M))."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != P.U.shape[0]:
        raise ShapeError(f"pinv expects last dim {P.U.shape[0]}, got {y.shape[-1]}")
    return ((y @ P.U) * P.sigma_inv) @ P.V.T


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    The stream label is hashed with BLAKE2b into the Philox key, so the draw
    sequence does not depend on Python's randomized ``hash``.
    """

    def __init__(self, seed: int, stream_id: str = "main"):
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        digest = hashlib.blake2b(self.stream_id.encode("utf-8"), digest_size=8).digest()
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF,
                 int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little")]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, label) -> "RngStream":
        """Independent stream derived from this one's seed and a sub-label."""
        return RngStream(self.seed, f"{self.stream_id}/{label}")

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r})"


def sample_uniform(rng: RngStream, lo: float, hi: float, n) -> np.ndarray:
    """Draw uniform values on ``[lo, hi)``; ``n`` may be an int or a shape tuple."""
    if not lo < hi:
        raise ValueError(f"invalid range: lo={lo} must be < hi={hi}")
    return rng.generator.uniform(lo, hi, size=n)
