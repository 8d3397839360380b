"""Random-feedback adaptive stabilization and certification.

The procedure draws ``k = 1 + ceil(r/p)`` Gaussian feedbacks, runs the plant
under each for one episode (continuing from the previous terminal state),
fits every episode's closed-loop matrix by least squares, and intersects the
operator-norm balls ``{theta : ||theta [I; L_i] - D_hat_i||_2 <= eps_tilde}``.
The point estimate is the stacked least-squares solution of
``theta M = [D_hat_1 ... D_hat_k]``. Episodes are simulated in exact
precision, so unstable episodes do not overflow or lose the noise signal.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (ConfigurationError, DegenerateDrawError, DimensionError,
                     NonConvergenceError)
from .identification import DEFAULT_RANK_TOL, SampleSizeParams, estimate_closed_loop, sample_size
from .riccati import CostMatrices, extended_gain, solve_dare
from .rng import make_rng
from .system import NoiseModel, SystemParams, simulate, spectral_radius

STABILIZING_SET_SCHEMA = "lqstab-stabilizing-set/1"

# stream keys under the run seed
_FEEDBACK_STREAM = 1
_EPISODE_STREAM = 2


def num_feedbacks(p, r):
    """``k = 1 + ceil(r / p)``."""
    return 1 + -(-int(r) // int(p))


def stacked_matrix(feedbacks):
    """``M = [[I ... I], [L_1 ... L_k]]``, a ``q x kp`` matrix."""
    feedbacks = [np.asarray(L, dtype=float) for L in feedbacks]
    p = feedbacks[0].shape[1]
    return np.vstack([np.hstack([np.eye(p)] * len(feedbacks)), np.hstack(feedbacks)])


def compute_epsilon_tilde(M, epsilon0, k, rank_tol=DEFAULT_RANK_TOL):
    """``(epsilon0 / 2k) * sigma_q(M)``; zero when ``M`` is numerically rank deficient.

    ``sigma_q(M)``, the smallest of the ``q`` singular values, equals the
    infimum of ``||theta M||_2 / ||theta||_2`` over nonzero ``theta``.
    """
    M = np.asarray(M, dtype=float)
    s = np.linalg.svd(M, compute_uv=False)
    q = M.shape[0]
    if s.size < q or s[q - 1] <= rank_tol * s[0]:
        return 0.0
    return float(epsilon0) / (2 * int(k)) * float(s[q - 1])


@dataclass(frozen=True, eq=False)
class RandomFeedbackBundle:
    k: int
    feedbacks: tuple
    M: np.ndarray
    epsilon_tilde: float
    redraws: int
    epsilon0: float

    @property
    def p(self):
        return self.feedbacks[0].shape[1]

    @property
    def r(self):
        return self.feedbacks[0].shape[0]


def draw_feedbacks(p, r, seed, eps_floor=0.0, epsilon0=1.0, max_redraws=100,
                   rank_tol=DEFAULT_RANK_TOL):
    """Draw ``k`` feedbacks whose columns are i.i.d. standard normal in ``R^r``.

    The whole bundle is redrawn from a fresh sub-stream while ``M`` is rank
    deficient or ``eps_tilde <= eps_floor``.
    """
    p, r = int(p), int(r)
    if p < 1 or r < 1:
        raise ConfigurationError("p and r must be at least 1")
    if not epsilon0 > 0:
        raise ConfigurationError("epsilon0 must be positive")
    if eps_floor < 0:
        raise ConfigurationError("eps_floor must be nonnegative")
    k = num_feedbacks(p, r)
    for attempt in range(int(max_redraws) + 1):
        rng = make_rng(seed, _FEEDBACK_STREAM, attempt)
        cols = rng.standard_normal((k, p, r))
        feedbacks = tuple(np.ascontiguousarray(c.T) for c in cols)
        M = stacked_matrix(feedbacks)
        eps = compute_epsilon_tilde(M, epsilon0, k, rank_tol)
        if eps > eps_floor:
            for L in feedbacks:
                L.setflags(write=False)
            M.setflags(write=False)
            return RandomFeedbackBundle(k, feedbacks, M, eps, attempt, float(epsilon0))
    raise DegenerateDrawError(
        f"no feedback bundle with eps_tilde > {eps_floor} after {max_redraws} redraws")


@dataclass(frozen=True, eq=False)
class StabilizingSet:
    bundle: RandomFeedbackBundle
    estimates: tuple
    epsilon_tilde: float
    delta: float
    theta_hat: SystemParams
    episode_boundaries: tuple
    empty: bool
    sizing: str
    seed: int

    @property
    def k(self):
        return self.bundle.k

    @property
    def episode_lengths(self):
        b = self.episode_boundaries
        return tuple(b[i + 1] - b[i] for i in range(len(b) - 1))

    def deviations(self, theta):
        """``||theta [I; L_i] - D_hat_i||_2`` for every episode."""
        th = theta.theta if isinstance(theta, SystemParams) else np.asarray(theta, dtype=float)
        return [float(np.linalg.norm(th @ extended_gain(L) - D, 2))
                for L, D in zip(self.bundle.feedbacks, self.estimates)]

    def to_dict(self):
        th = self.theta_hat
        return {
            "schema": STABILIZING_SET_SCHEMA,
            "p": th.p, "r": th.r, "k": self.k, "seed": int(self.seed),
            "epsilon0": self.bundle.epsilon0, "epsilon_tilde": self.epsilon_tilde,
            "delta": self.delta, "redraws": self.bundle.redraws, "sizing": self.sizing,
            "episode_boundaries": list(self.episode_boundaries),
            "feedbacks": [L.tolist() for L in self.bundle.feedbacks],
            "estimates": [D.tolist() for D in self.estimates],
            "theta_hat": {"A": th.A.tolist(), "B": th.B.tolist()},
            "empty": self.empty,
        }

    def to_json(self):
        # repr-exact floats keep the file bit-stable and lossless
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        if data.get("schema") != STABILIZING_SET_SCHEMA:
            raise ConfigurationError(f"unsupported stabilizing-set schema {data.get('schema')!r}")
        feedbacks = tuple(np.array(L, dtype=float) for L in data["feedbacks"])
        for L in feedbacks:
            L.setflags(write=False)
        M = stacked_matrix(feedbacks)
        M.setflags(write=False)
        bundle = RandomFeedbackBundle(int(data["k"]), feedbacks, M, float(data["epsilon_tilde"]),
                                      int(data["redraws"]), float(data["epsilon0"]))
        estimates = tuple(np.array(D, dtype=float) for D in data["estimates"])
        theta_hat = SystemParams(data["theta_hat"]["A"], data["theta_hat"]["B"])
        return cls(bundle, estimates, float(data["epsilon_tilde"]), float(data["delta"]),
                   theta_hat, tuple(int(t) for t in data["episode_boundaries"]),
                   bool(data["empty"]), data["sizing"], int(data["seed"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def membership(theta, sset):
    """True iff ``theta`` lies in every episode's confidence ball."""
    if not isinstance(theta, SystemParams):
        theta = SystemParams.from_theta(theta, sset.theta_hat.p)
    if (theta.p, theta.r) != (sset.theta_hat.p, sset.theta_hat.r):
        raise DimensionError("theta dimensions do not match the stabilizing set")
    return all(d <= sset.epsilon_tilde for d in sset.deviations(theta))


def episode_length(epsilon_tilde, delta, k, sizing=None, override=None):
    """Steps per episode: ``override`` if given, else ``sample_size(eps_tilde, delta/k)``."""
    if override is not None:
        if int(override) < 1:
            raise ConfigurationError("episode_length_override must be at least 1")
        return int(override)
    return sample_size(epsilon_tilde, delta / k, sizing or SampleSizeParams())


def run_stabilization(true_theta, noise, epsilon0, delta, sizing=None, seed=0, x0=None,
                      episode_length_override=None, eps_floor=0.0, max_redraws=100,
                      rank_tol=DEFAULT_RANK_TOL):
    """Run the episodic random-feedback procedure on ``true_theta``.

    Episode ``i`` uses noise stream ``(seed, 2, i)``; the feedbacks use
    ``(seed, 1, attempt)``. Each segment regression uses the transitions
    ``x(t) -> x(t+1)`` for ``tau_{i-1} <= t < tau_i``, all generated under
    ``L_i``. A ``theta_hat`` that misses some confidence ball marks the set
    empty instead of raising.
    """
    if not isinstance(true_theta, SystemParams):
        raise ConfigurationError("true_theta must be a SystemParams")
    if noise is not None and not isinstance(noise, NoiseModel):
        raise ConfigurationError("noise must be a NoiseModel or None")
    if not 0 < delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    p, r = true_theta.p, true_theta.r
    bundle = draw_feedbacks(p, r, seed, eps_floor, epsilon0, max_redraws, rank_tol)
    eps = bundle.epsilon_tilde
    length = episode_length(eps, delta, bundle.k, sizing, episode_length_override)
    state = np.zeros(p) if x0 is None else np.asarray(x0, dtype=float)
    boundaries = [0]
    estimates = []
    for i, L in enumerate(bundle.feedbacks):
        traj = simulate(true_theta, L, state, length, noise, seed=seed, precision="exact",
                        noise_keys=(_EPISODE_STREAM, i))
        estimates.append(estimate_closed_loop(traj, rank_tol, episode=i + 1).D_hat)
        state = traj.fixed_states[-1]
        boundaries.append(boundaries[-1] + length)
    target = np.hstack(estimates)
    sol, *_ = np.linalg.lstsq(bundle.M.T, target.T, rcond=None)
    theta_hat = SystemParams.from_theta(sol.T, p)
    sset = StabilizingSet(bundle, tuple(estimates), eps, float(delta), theta_hat,
                          tuple(boundaries), False,
                          "override" if episode_length_override is not None else "sample-size",
                          int(seed))
    if not membership(theta_hat, sset):
        object.__setattr__(sset, "empty", True)
    return sset


@dataclass(frozen=True)
class Certification:
    stable: bool
    spectral_radius: float
    reason: Optional[str] = None

    def __bool__(self):
        return self.stable


def certify(true_theta, design_theta, cost=None):
    """Does the Riccati gain of ``design_theta`` stabilize ``true_theta``?"""
    if cost is None:
        cost = CostMatrices.identity(true_theta.p, true_theta.r)
    if (design_theta.p, design_theta.r) != (true_theta.p, true_theta.r):
        raise DimensionError("design and true parameters have different dimensions")
    try:
        sol = solve_dare(design_theta, cost)
    except NonConvergenceError:
        return Certification(False, math.nan, "solver-nonconv")
    rho = spectral_radius(true_theta.closed_loop(sol.L))
    return Certification(bool(rho < 1), rho, None if rho < 1 else "cert-false")
