"""Pure-numpy reference versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def project_simplex_rows(Z):
    """Project each row of a 2-D array onto the probability simplex.

    Returns ``(X, theta)`` with ``X = max(Z - theta[:, None], 0)``.
    """
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    n = Z.shape[1]
    U = -np.sort(-Z, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    ks = np.arange(1, n + 1)
    cond = U - css / ks > 0
    # cond is true on a prefix; rho is its last index
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(Z.shape[0]), rho] / (rho + 1)
    return np.maximum(Z - theta[:, None], 0.0), theta


def minkowski_orthant_step(z, x, g, alpha):
    """Fused reflect/project/combine step of the Minkowski-sum splitting.

    ``z`` and ``x`` have shape (B, K, n), ``g`` has shape (B, n). Returns the
    next state ``z - x + max(2x - z - alpha*g, 0)`` and the per-sample
    residual ``sum_k ||z_next_k - z_k||``.
    """
    y = np.maximum(2.0 * x - z - alpha * g[:, None, :], 0.0)
    diff = y - x
    resid = np.sqrt(np.einsum("bkn,bkn->bk", diff, diff)).sum(axis=1)
    return z + diff, resid
