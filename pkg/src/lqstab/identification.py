"""Least-squares identification of closed-loop dynamics and spectral diagnostics.

``estimate_closed_loop`` minimizes ``sum_t ||x(t+1) - E x(t)||^2`` through a QR
factorization of the stacked regressor rows. Unstable closed loops make the
rows exponentially graded, so the rows are sorted by decreasing norm and the
columns equilibrated before factorizing; the singularity test is applied to
the column-equilibrated regressor. Trajectories from exact-precision runs are
fitted from their integer states instead: the normal equations are
accumulated and solved in rational arithmetic, and only the result is
rounded to float. Their singularity test compares ``lambda_min(V_n)`` with the
fixed-point resolution rather than with ``lambda_max``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import solve_triangular

from . import exact as _exact
from .errors import ConfigurationError, DimensionError, EstimationError, SingularGramError
from .rng import derive_seed
from .system import SystemParams, Trajectory, simulate

DEFAULT_RANK_TOL = 1e-8
DEFAULT_UNIT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class LeastSquaresEstimate:
    """Least-squares fit of one trajectory segment.

    ``gram`` and ``cross`` are ``sum x(t)x(t)'`` and ``sum x(t+1)x(t)'`` divided
    by ``2**gram_log2_scale`` (zero for unscaled trajectories). Exact-precision
    fits also report ``log2_min_eig``, the unscaled ``log2 lambda_min(V_n)``,
    which stays accurate when the scaled ``gram_min_eig`` underflows.
    """

    D_hat: np.ndarray
    gram: np.ndarray
    n: int
    gram_min_eig: float
    cross: np.ndarray
    gram_log2_scale: int = 0
    equilibrated_min_eig: float = math.nan
    log2_min_eig: float = math.nan


_SAFE = 2.0 ** 400


def _top_exponent(M):
    m = float(np.max(np.abs(M))) if M.size else 0.0
    return math.frexp(m)[1] if m > 0 else 0


def regression_rows(traj):
    """Regressor and target rows ``x(t), x(t+1)`` on a common binary scale.

    Returns ``(X, Y, s)`` with the true rows equal to ``X * 2**s``. Unscaled
    trajectories of moderate size come back untouched (``s = 0``); otherwise the
    largest regressor entry is placed near ``2**512`` so that entries down to
    roughly ``2**-1070`` relative remain representable.
    """
    Z = traj.states
    E = traj.exponents
    if E is None or not np.any(E):
        if Z.size == 0 or np.max(np.abs(Z)) <= _SAFE:
            return Z[:-1].copy(), Z[1:].copy(), 0
        E = np.zeros(Z.shape[0], dtype=np.int64)
    top = int(np.max(E[:-1] + np.array([_top_exponent(z) for z in Z[:-1]])))
    shift = top - 512
    scaled = np.ldexp(Z, (E - shift)[:, None])
    return scaled[:-1], scaled[1:], shift


def estimate_closed_loop(traj, rank_tol=DEFAULT_RANK_TOL, episode=None):
    """Least-squares closed-loop matrix ``D_hat`` from one trajectory."""
    if not isinstance(traj, Trajectory):
        raise ConfigurationError("estimate_closed_loop needs a Trajectory")
    if traj.n < 1:
        raise ConfigurationError("need at least one transition")
    if traj.fixed_states is not None:
        return _estimate_exact(traj, rank_tol, episode)
    X, Y, shift = regression_rows(traj)
    k = _top_exponent(X) if np.max(np.abs(X)) > _SAFE else 0
    Xg, Yg = np.ldexp(X, -k), np.ldexp(Y, -k)
    gram = Xg.T @ Xg
    cross = Yg.T @ Xg
    gram_min = float(np.linalg.eigvalsh(gram)[0])
    col = np.max(np.abs(X), axis=0)
    if np.any(col == 0) or X.shape[0] < X.shape[1]:
        raise SingularGramError(max(gram_min, 0.0), episode)
    Xs = X / col
    order = np.argsort(-np.max(np.abs(Xs), axis=1), kind="stable")
    Xs = Xs[order]
    Ys = Y[order]
    Qm, Rm = np.linalg.qr(Xs)
    sv = np.linalg.svd(Rm, compute_uv=False)
    eq_min, eq_max = sv[-1] ** 2, sv[0] ** 2
    if not eq_min > rank_tol * eq_max:
        raise SingularGramError(float(eq_min), episode)
    coef = solve_triangular(Rm, Qm.T @ Ys)  # (D_hat @ diag(col)).T
    D_hat = (coef / col[:, None]).T
    return LeastSquaresEstimate(D_hat=D_hat, gram=gram, n=traj.n, gram_min_eig=gram_min,
                                cross=cross, gram_log2_scale=2 * (shift + k),
                                equilibrated_min_eig=float(eq_min))


def _estimate_exact(traj, rank_tol, episode):
    # The rank test of the float path fails for any unstable mode that is not
    # axis-aligned: lambda_min / lambda_max of V shrinks geometrically in every
    # basis. The data here are exact, so V counts as singular only when its
    # smallest eigenvalue is below what fixed-point rounding alone could
    # produce (n p quanta squared), with a 1 / rank_tol margin.
    V, C = _exact.gram_sums(traj.fixed_states)
    (gram, cross), scale = _exact.scaled_float_matrix(V, C, frac_bits=2 * traj.frac_bits)
    gram_min = float(max(np.linalg.eigvalsh(gram)[0], 0.0))
    Vinv = _exact.inverse(V)
    if Vinv is None:
        raise SingularGramError(0.0, episode)
    log2_min = _exact.log2_min_eig(Vinv)
    p = len(V)
    if log2_min <= math.log2(traj.n * p / rank_tol):
        raise SingularGramError(math.ldexp(1.0, max(-1074, round(log2_min) - 2 * traj.frac_bits)),
                                episode)
    D_hat = np.array(_exact.solve_exact(V, C, Vinv))
    return LeastSquaresEstimate(D_hat=D_hat, gram=gram, n=traj.n,
                                gram_min_eig=gram_min, cross=cross,
                                gram_log2_scale=scale,
                                log2_min_eig=log2_min - 2 * traj.frac_bits)


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues: list
    outside_unit: list
    geometric_multiplicities: list
    regular: bool
    has_unit_eigenvalue: bool
    rank_tol: float = DEFAULT_RANK_TOL
    unit_tol: float = DEFAULT_UNIT_TOL

    def to_text(self):
        lines = [f"# lqstab-spectral/1 regular={str(self.regular).lower()} "
                 f"unit_eigenvalue={str(self.has_unit_eigenvalue).lower()} "
                 f"rank_tol={self.rank_tol:.3g} unit_tol={self.unit_tol:.3g}",
                 "real imag modulus geometric_multiplicity"]
        outside = iter(self.geometric_multiplicities)
        for lam in self.eigenvalues:
            mult = str(next(outside)) if abs(lam) > 1 else "-"
            lines.append(f"{lam.real:.17g} {lam.imag:.17g} {abs(lam):.17g} {mult}")
        return "\n".join(lines) + "\n"


def geometric_multiplicity(D, lam, rank_tol=DEFAULT_RANK_TOL):
    """``p - rank(D - lam I)``; singular values below ``rank_tol * max(s_max, ||D||_2)`` count as zero."""
    D = np.asarray(D)
    p = D.shape[0]
    s = np.linalg.svd(D - lam * np.eye(p), compute_uv=False)
    scale = max(s[0] if s.size else 0.0, np.linalg.norm(D, 2))
    return p - int(np.sum(s > rank_tol * scale))


def spectral_report(D, rank_tol=DEFAULT_RANK_TOL, unit_tol=DEFAULT_UNIT_TOL):
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise DimensionError(f"spectral_report needs a square matrix, got {D.shape}")
    eig = np.linalg.eigvals(D)
    eig = sorted(eig.astype(complex), key=lambda z: (-abs(z), z.real, z.imag))
    outside = [lam for lam in eig if abs(lam) > 1]
    mults = [geometric_multiplicity(D, lam, rank_tol) for lam in outside]
    unit = any(abs(abs(lam) - 1.0) < unit_tol for lam in eig)
    return SpectralReport(eigenvalues=list(eig), outside_unit=outside,
                          geometric_multiplicities=mults, regular=all(m == 1 for m in mults),
                          has_unit_eigenvalue=unit, rank_tol=rank_tol, unit_tol=unit_tol)


@dataclass(frozen=True)
class SampleSizeParams:
    """Constants of the sample-size condition.

    ``psi`` may be a constant, a callable of ``delta``, or None for the default
    linear form ``c_psi * delta``.
    """

    rho: float = 1.0
    alpha: float = 2.0
    c_psi: float = 1.0
    psi: Optional[Union[float, Callable[[float], float]]] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigurationError("rho must be positive")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if not self.c_psi > 0:
            raise ConfigurationError("c_psi must be positive")

    def psi_of(self, delta):
        if self.psi is None:
            return self.c_psi * delta
        if callable(self.psi):
            return float(self.psi(delta))
        return float(self.psi)


def sample_size_rhs(epsilon, delta, params):
    """Right-hand side ``(rho/eps^2) ((-log delta)^(1+4/alpha) - log psi(delta))``."""
    psi = params.psi_of(delta)
    if not psi > 0:
        raise ConfigurationError(f"psi(delta) must be positive, got {psi}")
    expo = 4.0 / params.alpha
    return params.rho / epsilon ** 2 * ((-math.log(delta)) ** (1.0 + expo) - math.log(psi))


def sample_size_lhs(n, alpha):
    """``n / (log n)^(4/alpha)``."""
    return n / math.log(n) ** (4.0 / alpha)


def sample_size(epsilon, delta, params):
    """Smallest ``N >= 3`` such that every ``n >= N`` satisfies the sample-size condition.

    ``n / (log n)^(4/alpha)`` decreases up to ``exp(4/alpha)`` and increases after
    it, so the answer is either 3 (the condition holds at the minimum) or the
    first passing integer on the increasing branch, found by exponential
    bracketing and bisection.
    """
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    rhs = sample_size_rhs(epsilon, delta, params)
    alpha = params.alpha
    turn = math.exp(min(4.0 / alpha, 700.0))
    m0 = 3
    if turn > 3:
        lo_c, hi_c = max(3, math.floor(turn)), max(3, math.ceil(turn))
        m0 = lo_c if sample_size_lhs(lo_c, alpha) <= sample_size_lhs(hi_c, alpha) else hi_c
    if sample_size_lhs(m0, alpha) >= rhs:
        return 3
    lo, hi = m0, max(m0 + 1, 2 * m0)
    while sample_size_lhs(hi, alpha) < rhs:
        lo, hi = hi, 2 * hi
    # invariant: lhs(lo) < rhs <= lhs(hi), both on the increasing branch
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if sample_size_lhs(mid, alpha) >= rhs:
            hi = mid
        else:
            lo = mid
    return hi


def normalized_gram_min_eig(traj):
    """``lambda_min(V_n / tr V_n)`` of a trajectory's Gram matrix."""
    if traj.fixed_states is not None:
        V, _ = _exact.gram_sums(traj.fixed_states)
        tr = sum(V[i][i] for i in range(len(V)))
        if tr == 0:
            return 0.0
        (G,), _ = _exact.scaled_float_matrix(V, frac_bits=2 * traj.frac_bits)
        return float(max(np.linalg.eigvalsh(G / np.trace(G))[0], 0.0))
    X, _, _ = regression_rows(traj)
    if not np.any(X):
        return 0.0
    X = np.ldexp(X, -_top_exponent(X))
    G = X.T @ X
    return float(max(np.linalg.eigvalsh(G / np.trace(G))[0], 0.0))


def estimate_psi(D, noise, delta, n_steps, n_mc, seed, rank_tol=DEFAULT_RANK_TOL):
    """Empirical ``delta``-quantile of ``lambda_min`` of the trace-normalized Gram matrix.

    Runs ``n_mc`` independent trajectories of ``x(t+1) = D x(t) + w(t+1)`` from
    ``x(0) = 0``. The trace normalization is a practical stand-in, useful as a
    diagnostic or as a default for :class:`SampleSizeParams`.
    """
    D = np.asarray(D, dtype=float)
    if not 0 < delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    if int(n_mc) < 100:
        raise ConfigurationError("n_mc must be at least 100")
    if int(n_steps) < 1:
        raise ConfigurationError("n_steps must be at least 1")
    if not spectral_report(D, rank_tol).regular:
        raise ConfigurationError("estimate_psi needs a regular D")
    p = D.shape[0]
    plant = SystemParams(D, np.zeros((p, 1)))
    zero_gain = np.zeros((1, p))
    values = np.empty(int(n_mc))
    for j in range(int(n_mc)):
        traj = simulate(plant, zero_gain, np.zeros(p), int(n_steps), noise,
                        seed=derive_seed(seed, j), precision="exact")
        values[j] = normalized_gram_min_eig(traj)
    q = float(np.quantile(values, delta, method="inverted_cdf"))
    if not q > 0:
        raise EstimationError(f"the {delta}-quantile of lambda_min is {q}; increase n_steps")
    return q
