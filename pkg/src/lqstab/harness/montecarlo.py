"""Monte Carlo replication of the stabilization procedure and policy-cost evaluation."""
from __future__ import annotations

import math
import time
from functools import partial

import numpy as np

from ..errors import LQStabError
from ..rng import derive_seed
from ..stabilization import certify, run_stabilization
from ..system import average_cost, simulate
from .parallel import pmap
from .report import Aggregate, ReplicateRow, RunReport


def _replicate(config, index):
    seed = derive_seed(config.seed, index)
    start = time.perf_counter()
    theta = config.system_params()
    noise = config.noise_model(theta)
    alg = config.algorithm
    rho, eps, redraws, lengths = math.nan, math.nan, -1, ()
    try:
        sset = run_stabilization(theta, noise, alg.epsilon0, alg.delta,
                                 sizing=config.sizing_params(noise), seed=seed, x0=alg.x0,
                                 episode_length_override=alg.episode_length,
                                 eps_floor=alg.eps_floor, max_redraws=alg.max_redraws,
                                 rank_tol=alg.rank_tol)
        eps, redraws, lengths = sset.epsilon_tilde, sset.bundle.redraws, sset.episode_lengths
        cert = certify(theta, sset.theta_hat, config.cost_matrices(theta))
        rho = cert.spectral_radius
        if sset.empty:
            reason = "empty-set"
        else:
            reason = cert.reason or ""
    except LQStabError as exc:
        reason = exc.reason
    except np.linalg.LinAlgError:
        reason = "linalg"
    return ReplicateRow(index, seed, reason == "", reason, float(rho), float(eps), int(redraws),
                        tuple(int(v) for v in lengths), time.perf_counter() - start)


def run_montecarlo(config, workers=1):
    """Independent replicates with seeds ``derive_seed(config.seed, i)``.

    Errors inside a replicate become failure rows. Rows come back in
    replicate order, so the report does not depend on ``workers``.
    """
    n = config.montecarlo.replicates
    rows = tuple(pmap(partial(_replicate, config), range(n), workers))
    agg = Aggregate.from_rows(rows, config.montecarlo.confidence, 1.0 - config.algorithm.delta)
    sizing = ("override" if config.algorithm.episode_length is not None else "sample-size")
    return RunReport(rows, agg, config.echo(), sizing)


def _cost_replicate(args, index):
    theta, gain, cost, noise, T, seed = args
    traj = simulate(theta, gain, np.zeros(theta.p), T, noise, seed=derive_seed(seed, index))
    return average_cost(traj, cost.Q, cost.R)


def evaluate_policy_cost(theta, gain, cost, noise, T, n_reps, seed, workers=1):
    """Mean and standard error of the average cost over ``n_reps`` runs of length ``T``."""
    values = np.array(pmap(partial(_cost_replicate, (theta, gain, cost, noise, int(T), seed)),
                           range(int(n_reps)), workers))
    if values.size < 2:
        return float(values.mean()) if values.size else math.nan, math.nan
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))
