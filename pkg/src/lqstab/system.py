"""LQ system parameters, sub-Weibull noise, and closed-loop simulation.

The plant is ``x(t+1) = A x(t) + B u(t) + w(t+1)`` driven by a linear feedback
``u(t) = L x(t)``.

:func:`simulate` has two precisions. ``"float"`` runs the compiled float64
recursion and aborts with :class:`~lqstab.errors.SimulationOverflow` once a
coordinate passes ``cap``. ``"exact"`` keeps states as fixed-point integers
(see :mod:`lqstab.exact`) so that unstable closed loops can run for thousands
of steps without losing the noise contribution; its float view is stored as
``states[t] * 2**exponents[t]``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gamma

from ._backend import get_kernels
from .errors import ConfigurationError, DimensionError, SimulationOverflow
from . import exact as _exact
from .rng import make_rng

DEFAULT_CAP = 1e300
NOISE_KINDS = ("gaussian", "symmetric-weibull", "uniform-bounded")
TRAJECTORY_SCHEMA = "lqstab-trajectory/1"


def _as_matrix(value, name, shape=None):
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise DimensionError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SystemParams:
    """The dynamics pair ``theta = [A, B]`` (a ``p x q`` matrix, ``q = p + r``)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        B = _as_matrix(self.B, "B")
        if B.shape[0] != A.shape[0]:
            raise DimensionError(f"B must have {A.shape[0]} rows, got {B.shape[0]}")
        if B.shape[1] < 1:
            raise DimensionError("B needs at least one column")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def p(self):
        return self.A.shape[0]

    @property
    def r(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.p + self.r

    @property
    def theta(self):
        return np.hstack([self.A, self.B])

    @classmethod
    def from_theta(cls, theta, p):
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:, :p], theta[:, p:])

    def closed_loop(self, L):
        L = np.asarray(L, dtype=float)
        if L.shape != (self.r, self.p):
            raise DimensionError(f"feedback must be {self.r}x{self.p}, got {L.shape}")
        return self.A + self.B @ L

    def __eq__(self, other):
        if not isinstance(other, SystemParams):
            return NotImplemented
        return np.array_equal(self.A, other.A) and np.array_equal(self.B, other.B)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Sub-Weibull disturbance: i.i.d. unit-variance coordinates shaped by ``chol(C)``.

    ``b1``/``b2`` default to constants for which
    ``P(|w_i| > y) <= b1 * exp(-y**alpha / b2)`` provably holds for the chosen kind
    and covariance. ``uniform-bounded`` uses ``alpha = inf``: the bound is the
    indicator of ``y`` being below the support radius.
    """

    kind: str
    C: np.ndarray
    alpha: Optional[float] = None
    b1: Optional[float] = None
    b2: Optional[float] = None
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        C = _as_matrix(self.C, "C")
        if C.shape[0] != C.shape[1]:
            raise DimensionError(f"C must be square, got {C.shape}")
        if not np.allclose(C, C.T, rtol=0, atol=1e-12 * max(1.0, np.abs(C).max())):
            raise ConfigurationError("covariance C must be symmetric")
        C = _frozen(0.5 * (C + C.T))
        try:
            chol = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            raise ConfigurationError("covariance C must be positive definite") from None
        if np.linalg.eigvalsh(C)[0] <= 0:
            raise ConfigurationError("covariance C must be positive definite")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "chol", _frozen(chol))

        alpha = self.alpha
        if self.kind == "gaussian":
            if alpha is not None and alpha != 2:
                raise ConfigurationError("gaussian noise has alpha = 2")
            alpha = 2.0
        elif self.kind == "uniform-bounded":
            if alpha is not None and not math.isinf(alpha):
                raise ConfigurationError("uniform-bounded noise has alpha = inf")
            alpha = math.inf
        else:
            if alpha is None or not alpha > 0 or math.isinf(alpha):
                raise ConfigurationError("symmetric-weibull noise needs a finite alpha > 0")
            alpha = float(alpha)
        object.__setattr__(self, "alpha", alpha)

        b1, b2 = self._default_tail_constants()
        if self.b1 is not None:
            if not self.b1 > 0:
                raise ConfigurationError("b1 must be positive")
            b1 = float(self.b1)
        if self.b2 is not None:
            if not self.b2 > 0:
                raise ConfigurationError("b2 must be positive")
            b2 = float(self.b2)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "b2", b2)

    @property
    def p(self):
        return self.C.shape[0]

    @classmethod
    def gaussian(cls, C):
        return cls("gaussian", C)

    @classmethod
    def weibull(cls, alpha, C):
        return cls("symmetric-weibull", C, alpha=alpha)

    @classmethod
    def uniform(cls, C):
        return cls("uniform-bounded", C)

    @property
    def raw_std(self):
        """Standard deviation of one pre-standardization coordinate."""
        if self.kind == "gaussian":
            return 1.0
        if self.kind == "uniform-bounded":
            return 1.0 / math.sqrt(3.0)
        return math.sqrt(gamma(1.0 + 2.0 / self.alpha))

    @property
    def support_radius(self):
        """Per-coordinate bound on ``|w_i|`` (finite only for uniform-bounded)."""
        if self.kind != "uniform-bounded":
            return math.inf
        return math.sqrt(3.0) * float(np.abs(self.chol).sum(axis=1).max())

    def _default_tail_constants(self):
        if self.kind == "gaussian":
            return 2.0, 2.0 * float(np.diag(self.C).max())
        if self.kind == "uniform-bounded":
            return 1.0, 1.0
        # w_i = sum_j l_ij s_j with P(|s_j| > y) = exp(-(raw_std * y)**alpha);
        # a union bound over the nonzero terms gives these constants
        rows = np.abs(self.chol)
        b1 = float(max(np.count_nonzero(row) for row in rows))
        b2 = float((rows.sum(axis=1).max() / self.raw_std) ** self.alpha)
        return b1, b2

    def tail_bound(self, y):
        """``b1 * exp(-y**alpha / b2)`` (indicator form for bounded noise)."""
        y = np.asarray(y, dtype=float)
        if math.isinf(self.alpha):
            return np.where(y < self.support_radius, 1.0, 0.0)
        return self.b1 * np.exp(-(y ** self.alpha) / self.b2)


def sample_noise(noise, seed, count, *keys):
    """Draw ``count`` i.i.d. noise vectors, shape ``(count, p)``."""
    if count < 0:
        raise ConfigurationError("count must be nonnegative")
    if not isinstance(noise, NoiseModel):
        raise ConfigurationError("sample_noise needs a NoiseModel")
    rng = make_rng(seed, *keys)
    shape = (int(count), noise.p)
    if noise.kind == "gaussian":
        raw = rng.standard_normal(shape)
    elif noise.kind == "uniform-bounded":
        raw = rng.uniform(-1.0, 1.0, shape)
    else:
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        raw = sign * rng.standard_exponential(shape) ** (1.0 / noise.alpha)
    return (raw / noise.raw_std) @ noise.chol.T


def spectral_radius(M):
    """Largest eigenvalue modulus of a square matrix."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"spectral_radius needs a square matrix, got shape {M.shape}")
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def random_stabilizable(p, r, seed, radius=0.9, b_rank=None):
    """A stabilizable ``(A, B)``: draw a stable ``D``, a ``B`` and an ``L``, set ``A = D - B L``.

    ``D`` is Gaussian rescaled to spectral radius ``radius``; ``b_rank`` below
    ``min(p, r)`` makes ``B`` rank deficient. Also returns the stabilizer ``L``.
    """
    if p < 1 or r < 1:
        raise ConfigurationError("p and r must be at least 1")
    rng = make_rng(seed)
    D = rng.standard_normal((p, p))
    rho = spectral_radius(D)
    D = D * (radius / rho) if rho > 0 else D
    if b_rank is None:
        B = rng.standard_normal((p, r))
    else:
        if not 1 <= b_rank <= min(p, r):
            raise ConfigurationError("b_rank must lie in 1..min(p, r)")
        B = rng.standard_normal((p, b_rank)) @ rng.standard_normal((b_rank, r))
    L = rng.standard_normal((r, p))
    return SystemParams(D - B @ L, B), L


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States ``x(0..n)`` and inputs ``u(0..n-1)`` of one run.

    When ``exponents`` is set the true state is ``states[t] * 2**exponents[t]``
    and likewise for ``inputs[t]``. Exact-precision runs also carry
    ``fixed_states``, the integer states scaled by ``2**frac_bits``.
    """

    states: np.ndarray
    inputs: np.ndarray
    seed: Optional[int] = None
    feedback: Optional[np.ndarray] = None
    exponents: Optional[np.ndarray] = None
    fixed_states: Optional[tuple] = None
    frac_bits: int = _exact.FRAC_BITS

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        inputs = np.array(self.inputs, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if states.shape[0] != inputs.shape[0] + 1:
            raise DimensionError("a trajectory needs exactly one more state than inputs")
        if states.shape[0] < 1:
            raise DimensionError("empty trajectory")
        states.setflags(write=False)
        inputs.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)
        if self.feedback is not None:
            object.__setattr__(self, "feedback", _as_matrix(self.feedback, "feedback"))
        if self.exponents is not None:
            exps = np.array(self.exponents, dtype=np.int64)
            if exps.shape != (states.shape[0],):
                raise DimensionError("exponents must have one entry per state")
            exps.setflags(write=False)
            object.__setattr__(self, "exponents", exps)
        if self.fixed_states is not None:
            fixed = tuple(tuple(int(v) for v in row) for row in self.fixed_states)
            if len(fixed) != states.shape[0]:
                raise DimensionError("fixed_states must have one row per state")
            object.__setattr__(self, "fixed_states", fixed)

    @property
    def n(self):
        """Number of transitions."""
        return self.inputs.shape[0]

    @property
    def p(self):
        return self.states.shape[1]

    @property
    def r(self):
        return self.inputs.shape[1]

    @property
    def is_scaled(self):
        return self.exponents is not None and bool(np.any(self.exponents))

    def segment(self, start, stop):
        """Sub-trajectory with states ``x(start..stop)`` and inputs ``u(start..stop-1)``."""
        if not 0 <= start < stop <= self.n:
            raise DimensionError(f"segment [{start}, {stop}] outside 0..{self.n}")
        return Trajectory(
            self.states[start:stop + 1], self.inputs[start:stop], seed=self.seed,
            feedback=self.feedback,
            exponents=None if self.exponents is None else self.exponents[start:stop + 1],
            fixed_states=None if self.fixed_states is None else self.fixed_states[start:stop + 1],
            frac_bits=self.frac_bits)

    def true_states(self):
        """States in absolute units (may overflow to inf for scaled trajectories)."""
        if self.exponents is None:
            return self.states
        with np.errstate(over="ignore"):
            return np.ldexp(self.states, self.exponents[:, None])

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        same_exp = (self.exponents is None and other.exponents is None) or (
            self.exponents is not None and other.exponents is not None
            and np.array_equal(self.exponents, other.exponents))
        return (np.array_equal(self.states, other.states)
                and np.array_equal(self.inputs, other.inputs) and same_exp)

    __hash__ = None


def simulate(theta, feedback, x0, n, noise=None, seed=0, *, cap=DEFAULT_CAP,
             precision="float", backend=None, noise_keys=()):
    """Simulate ``n`` steps under ``u(t) = feedback @ x(t)``.

    ``x0`` is a float vector, or for ``precision="exact"`` optionally the
    ``fixed_states`` row of an earlier exact run (a tuple of ints) to continue
    it without rounding. Noise comes from the stream ``(seed, *noise_keys)``;
    ``noise=None`` gives the deterministic recursion.
    """
    if not isinstance(theta, SystemParams):
        raise ConfigurationError("theta must be a SystemParams")
    if precision not in ("float", "exact"):
        raise ConfigurationError(f"precision must be 'float' or 'exact', got {precision!r}")
    n = int(n)
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    L = _as_matrix(feedback, "feedback", (theta.r, theta.p))
    x0_fixed = None
    if isinstance(x0, tuple) and x0 and all(isinstance(v, int) for v in x0):
        if precision != "exact":
            raise ConfigurationError("an integer x0 is only accepted with precision='exact'")
        x0_fixed = x0
        if len(x0_fixed) != theta.p:
            raise DimensionError(f"x0 must have length {theta.p}, got {len(x0_fixed)}")
    else:
        x0 = np.array(x0, dtype=float).reshape(-1)
        if x0.shape != (theta.p,):
            raise DimensionError(f"x0 must have length {theta.p}, got {x0.shape[0]}")
        if not np.all(np.isfinite(x0)):
            raise ConfigurationError("x0 has non-finite entries")
    if noise is not None:
        if not isinstance(noise, NoiseModel):
            raise ConfigurationError("noise must be a NoiseModel or None")
        if noise.p != theta.p:
            raise DimensionError(f"noise dimension {noise.p} does not match p={theta.p}")
        W = sample_noise(noise, seed, n, *noise_keys)
    else:
        W = np.zeros((n, theta.p))
    D = np.ascontiguousarray(theta.closed_loop(L))
    if precision == "float":
        X, bad, mag = get_kernels(backend).simulate_closed_loop(
            D, np.ascontiguousarray(x0), np.ascontiguousarray(W), float(cap))
        if bad >= 0:
            raise SimulationOverflow(int(bad), float(mag))
        return Trajectory(X, X[:-1] @ L.T, seed=seed, feedback=L)
    if x0_fixed is None:
        x0_fixed = [int(v) for v in _exact.to_fixed(x0)]
    fixed, bad = _exact.simulate_fixed(D, x0_fixed, W)
    if bad >= 0:
        raise SimulationOverflow(bad, math.inf)
    Z, E = _exact.float_view(fixed)
    return Trajectory(Z, Z[:-1] @ L.T, seed=seed, feedback=L, exponents=E, fixed_states=fixed)


def average_cost(traj, Q, R):
    """``(1/T) sum_{t=1..T} x(t)'Q x(t) + u(t)'R u(t)`` over a trajectory.

    ``u(t)`` for ``t < T`` are the recorded inputs; ``u(T) = feedback @ x(T)``
    using the trajectory's recorded feedback (taken as zero when none is stored).
    """
    Q = _as_matrix(Q, "Q", (traj.p, traj.p))
    R = _as_matrix(R, "R", (traj.r, traj.r))
    if traj.n < 1:
        raise ConfigurationError("average_cost needs at least one transition")
    if traj.is_scaled:
        raise SimulationOverflow(int(np.argmax(traj.exponents > 0)), math.inf)
    X = traj.states[1:]
    if traj.feedback is not None:
        if traj.feedback.shape != (traj.r, traj.p):
            raise DimensionError("trajectory feedback has the wrong shape")
        u_last = traj.feedback @ traj.states[-1]
    else:
        u_last = np.zeros(traj.r)
    U = np.vstack([traj.inputs[1:], u_last[None, :]])
    costs = np.einsum("ti,ij,tj->t", X, Q, X) + np.einsum("ti,ij,tj->t", U, R, U)
    return float(np.mean(costs))


def _fmt(v):
    return format(float(v), ".17g")


def trajectory_to_csv(traj):
    """CSV text: columns ``t, x_1..x_p, u_1..u_r`` (+ ``log2_scale`` when scaled)."""
    buf = io.StringIO()
    buf.write(f"# {TRAJECTORY_SCHEMA} p={traj.p} r={traj.r} n={traj.n} seed={traj.seed}\n")
    if traj.feedback is not None:
        buf.write("# feedback=" + ";".join(_fmt(v) for v in traj.feedback.ravel()) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    header = ["t"] + [f"x_{i + 1}" for i in range(traj.p)] + [f"u_{j + 1}" for j in range(traj.r)]
    if traj.exponents is not None:
        header.append("log2_scale")
    writer.writerow(header)
    for t in range(traj.n + 1):
        row = [str(t)] + [_fmt(v) for v in traj.states[t]]
        row += [_fmt(v) for v in traj.inputs[t]] if t < traj.n else [""] * traj.r
        if traj.exponents is not None:
            row.append(str(int(traj.exponents[t])))
        writer.writerow(row)
    return buf.getvalue()


def write_trajectory_csv(traj, path):
    with open(path, "w", newline="") as fh:
        fh.write(trajectory_to_csv(traj))


def trajectory_from_csv(text):
    seed = None
    feedback = None
    lines = text.splitlines()
    body = []
    meta = {}
    for line in lines:
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    k, v = token.split("=", 1)
                    meta[k] = v
        elif line.strip():
            body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    p = sum(1 for h in header if h.startswith("x_"))
    r = sum(1 for h in header if h.startswith("u_"))
    scaled = "log2_scale" in header
    states, inputs, exps = [], [], []
    for row in reader:
        states.append([float(v) for v in row[1:1 + p]])
        if row[1 + p] != "":
            inputs.append([float(v) for v in row[1 + p:1 + p + r]])
        if scaled:
            exps.append(int(row[1 + p + r]))
    if meta.get("seed", "None") != "None":
        seed = int(meta["seed"])
    if "feedback" in meta:
        feedback = np.array([float(v) for v in meta["feedback"].split(";")]).reshape(r, p)
    return Trajectory(np.array(states).reshape(-1, p), np.array(inputs).reshape(-1, r),
                      seed=seed, feedback=feedback, exponents=exps if scaled else None)


def read_trajectory_csv(path):
    with open(path) as fh:
        return trajectory_from_csv(fh.read())
