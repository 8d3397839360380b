"""Riccati value iteration, LQ gains and the stabilizing-neighborhood estimator.

The solver runs the finite-horizon recursion

    P_t = Q + A'P A - A'P B (B'P B + R)^{-1} B'P A,   P_0 = 0

to its fixed point ``K`` and returns the gain ``L = -(B'K B + R)^{-1} B'K A``.
Running out of iterations is the stabilizability diagnostic: for a
non-stabilizable pair the iterates grow without bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._backend import get_kernels
from .errors import ConfigurationError, DimensionError, EstimationError, NonConvergenceError
from .rng import make_rng
from .system import SystemParams, _as_matrix, spectral_radius

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 100_000


@dataclass(frozen=True, eq=False)
class CostMatrices:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R"):
            M = _as_matrix(getattr(self, name), name)
            if M.shape[0] != M.shape[1]:
                raise DimensionError(f"{name} must be square, got {M.shape}")
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise ConfigurationError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M)[0] <= 0:
                raise ConfigurationError(f"{name} must be positive definite")
            object.__setattr__(self, name, M)

    @classmethod
    def identity(cls, p, r):
        return cls(np.eye(p), np.eye(r))

    def check(self, theta):
        if self.Q.shape != (theta.p, theta.p) or self.R.shape != (theta.r, theta.r):
            raise DimensionError(
                f"cost shapes Q{self.Q.shape}, R{self.R.shape} do not match p={theta.p}, r={theta.r}")


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    K: np.ndarray
    L: np.ndarray
    fixed_point_residual: float
    lyapunov_residual: float
    iterations: int
    converged: bool


def riccati_map(theta, cost, P):
    """One value-iteration step ``P -> Q + A'PA - A'PB(B'PB+R)^{-1}B'PA``."""
    A, B = theta.A, theta.B
    S = B.T @ P @ B + cost.R
    G = B.T @ P @ A
    out = cost.Q + A.T @ P @ A - G.T @ np.linalg.solve(S, G)
    return 0.5 * (out + out.T)


def value_iteration(theta, cost, P0=None, steps=1):
    """Yield ``P_1 .. P_steps`` of the recursion started at ``P0`` (default 0)."""
    P = np.zeros((theta.p, theta.p)) if P0 is None else np.array(P0, dtype=float)
    for _ in range(steps):
        P = riccati_map(theta, cost, P)
        yield P


def gain_from_K(theta, K, R):
    """``-(B'KB + R)^{-1} B'KA``."""
    K = np.asarray(K, dtype=float)
    R = np.asarray(R, dtype=float)
    if K.shape != (theta.p, theta.p) or R.shape != (theta.r, theta.r):
        raise DimensionError(f"K must be {theta.p}x{theta.p} and R {theta.r}x{theta.r}")
    A, B = theta.A, theta.B
    S = B.T @ K @ B + R
    return -np.linalg.solve(S, B.T @ K @ A)


def extended_gain(L):
    """Stack ``[I_p ; L]`` so that ``theta @ extended_gain(L) == A + B L``."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    return np.vstack([np.eye(L.shape[1]), L])


def is_stabilizer(theta, L, margin=0.0):
    return spectral_radius(theta.closed_loop(L)) < 1.0 - margin


def lyapunov_residual(K, L, theta, cost):
    """``||K - D'KD - (Q + L'RL)||_2`` with ``D = A + BL``."""
    K = np.asarray(K, dtype=float)
    L = np.asarray(L, dtype=float)
    D = theta.closed_loop(L)
    return float(np.linalg.norm(K - D.T @ K @ D - (cost.Q + L.T @ cost.R @ L), 2))


def optimal_average_cost(K, C):
    K = np.asarray(K, dtype=float)
    C = np.asarray(C, dtype=float)
    if K.shape != C.shape or K.ndim != 2:
        raise DimensionError(f"K {K.shape} and C {C.shape} must be square of equal size")
    return float(np.trace(K @ C))


def solve_dare(theta, cost, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, P0=None, backend=None):
    """Value iteration to the stabilizing Riccati solution.

    Stops once ``||P_t - P_{t-1}||_2 <= tol * max(1, ||P_t||_2)``; raises
    :class:`NonConvergenceError` after ``max_iter`` iterations.
    """
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    cost.check(theta)
    p = theta.p
    if P0 is None:
        P0 = np.zeros((p, p))
    else:
        P0 = _as_matrix(P0, "P0", (p, p))
    A = np.ascontiguousarray(theta.A)
    B = np.ascontiguousarray(theta.B)
    Q = np.ascontiguousarray(cost.Q)
    R = np.ascontiguousarray(cost.R)
    kern = get_kernels(backend)
    P = np.ascontiguousarray(P0, dtype=float)
    done = 0
    residual = math.inf
    converged = False
    # absolute tolerance in the kernel; rescaled between chunks as ||P|| settles
    while done < max_iter:
        scale = max(1.0, float(np.linalg.norm(P, 2))) if done else 1.0
        chunk = min(max_iter - done, 1000 if done == 0 else 10_000)
        P, it, residual, converged = kern.riccati_iterate(A, B, Q, R, P, tol * scale, chunk)
        P = np.ascontiguousarray(P)
        done += it
        if not math.isfinite(residual) and not converged:
            break
        if converged:
            # re-check against the final scale; the chunk may have used a smaller one
            if residual <= tol * max(1.0, float(np.linalg.norm(P, 2))):
                break
            converged = False
    if not converged:
        raise NonConvergenceError(done, residual)
    K = P
    L = gain_from_K(theta, K, cost.R)
    fp = float(np.linalg.norm(K - riccati_map(theta, cost, K), 2))
    ly = lyapunov_residual(K, L, theta, cost)
    return RiccatiSolution(K=K, L=L, fixed_point_residual=fp, lyapunov_residual=ly,
                           iterations=done, converged=True)


def _unit_spectral_direction(delta):
    delta = delta / np.linalg.norm(delta)
    return delta / np.linalg.norm(delta, 2)


def estimate_stabilizing_radius(theta, n_samples, seed, cost=None, rel_tol=1e-4,
                                max_doublings=30, solver_tol=1e-10, solver_max_iter=20_000,
                                refine=5, refine_steps=60):
    """Sampled estimate of the radius of the stabilizing neighborhood of ``theta``.

    For a radius ``eps`` and a unit-spectral-norm direction ``Delta`` the design
    point is ``theta' = theta + eps * Delta``; it passes when ``L(theta')``
    stabilizes the true ``theta``. Each of ``n_samples`` random directions gets
    its critical radius by doubling then bisection. The ``refine`` worst
    directions are then improved by a shrinking random local search on the
    sphere. The result is the largest radius that passed along every probed
    direction: an estimate of the worst case, not a certified bound.
    """
    if int(n_samples) < 1:
        raise ConfigurationError("n_samples must be at least 1")
    if cost is None:
        cost = CostMatrices.identity(theta.p, theta.r)
    solve_dare(theta, cost)  # propagates NonConvergenceError for non-stabilizable theta
    base = theta.theta
    p, q = theta.p, theta.q

    def passes(eps, d):
        design = SystemParams.from_theta(base + eps * d, p)
        try:
            L = solve_dare(design, cost, tol=solver_tol, max_iter=solver_max_iter).L
        except NonConvergenceError:
            return False
        return spectral_radius(theta.A + theta.B @ L) < 1.0

    def critical(d, cap=None):
        # (largest passing, smallest failing) radius along d; with a cap, only
        # radii below it are searched
        if cap is not None:
            if passes(cap, d):
                return cap, math.inf
            lo, hi = 0.0, cap
        else:
            lo, hi = 0.0, max(1.0, float(np.linalg.norm(base, 2)))
            for _ in range(max_doublings):
                if not passes(hi, d):
                    break
                lo, hi = hi, 2.0 * hi
            else:
                return lo, math.inf
        for _ in range(200):
            if hi - lo <= rel_tol * hi:
                break
            mid = 0.5 * (lo + hi)
            if passes(mid, d):
                lo = mid
            else:
                hi = mid
        return lo, hi

    dirs = [_unit_spectral_direction(make_rng(seed, j).standard_normal((p, q)))
            for j in range(int(n_samples))]
    crit = [critical(d) for d in dirs]
    best = min(c[0] for c in crit)
    order = sorted(range(len(dirs)), key=lambda j: crit[j][0])[:max(0, int(refine))]
    for rank, j in enumerate(order):
        rng = make_rng(seed, int(n_samples), rank)
        d, c = dirs[j], crit[j][0]
        step = 0.1
        for _ in range(int(refine_steps)):
            trial = _unit_spectral_direction(d + step * _unit_spectral_direction(
                rng.standard_normal((p, q))))
            # only a strictly lower critical radius matters, so cap the search at c
            lo, _ = critical(trial, cap=c)
            if lo < c:
                d, c = trial, lo
                step *= 1.5
            else:
                step *= 0.7
        best = min(best, c)
    if best <= 0.0:
        raise EstimationError("no positive radius passed; increase the bisection depth")
    return best
