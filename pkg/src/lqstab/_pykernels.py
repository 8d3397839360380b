"""Pure-Python reference versions of the compiled kernels.

Selected automatically when the Cython extension is not built, or forced with
``LQSTAB_BACKEND=python``. Semantics must stay identical to ``_kernels.pyx``.
"""
import math

import numpy as np


def simulate_closed_loop(D, x0, W, cap):
    """Run ``x(t+1) = D x(t) + w(t+1)`` until ``n`` steps or a coordinate exceeds ``cap``.

    Returns ``(X, bad_step, magnitude)``; ``bad_step`` is -1 on success.
    """
    p = D.shape[0]
    n = W.shape[0]
    X = np.empty((n + 1, p))
    X[0] = x = x0
    for t in range(n):
        x = D @ x + W[t]
        X[t + 1] = x
        m = float(np.max(np.abs(x)))
        if not m <= cap:
            return X, t + 1, m
    return X, -1, 0.0


def riccati_iterate(A, B, Q, R, P0, tol, max_iter):
    """Value iteration from ``P0``; returns ``(P, iterations, residual, converged)``."""
    P = np.array(P0, dtype=float, copy=True)
    residual = math.inf
    it = 0
    while it < max_iter:
        it += 1
        PA = P @ A
        PB = P @ B
        S = B.T @ PB + R
        G = B.T @ PA
        try:
            c = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return P, it, math.inf, False
        X = np.linalg.solve(c.T, np.linalg.solve(c, G))
        Pn = Q + A.T @ PA - G.T @ X
        Pn = 0.5 * (Pn + Pn.T)
        if not np.all(np.isfinite(Pn)):
            return P, it, math.inf, False
        residual = float(np.max(np.abs(np.linalg.eigvalsh(Pn - P))))
        P = Pn
        if residual <= tol:
            return P, it, residual, True
    return P, it, residual, False
