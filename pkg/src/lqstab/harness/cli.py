"""Command-line entry point: ``lqstab <subcommand> --config FILE [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import yaml

from ..errors import ConfigurationError, LQStabError
from ..identification import estimate_closed_loop, estimate_psi, spectral_report
from ..riccati import estimate_stabilizing_radius, optimal_average_cost, solve_dare
from ..stabilization import certify, run_stabilization
from ..system import read_trajectory_csv, simulate, trajectory_to_csv
from .config import config_schema, parse_config
from .montecarlo import run_montecarlo
from .parallel import WORKERS_ENV, resolve_workers
from .report import emit_report, fmt, report_to_text

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _matrix_lines(name, M):
    M = np.atleast_2d(M)
    return [name] + [" ".join(fmt(float(v)) for v in row) for row in M]


def _write_out(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _load(args):
    if args.config is None:
        raise ConfigurationError("--config is required for this subcommand")
    if not os.path.isfile(args.config):
        raise ConfigurationError(f"config file not found: {args.config}")
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(args.config, overrides)


def cmd_riccati(args):
    cfg = _load(args)
    theta = cfg.system_params()
    cost = cfg.cost_matrices(theta)
    sol = solve_dare(theta, cost, cfg.riccati.tol, cfg.riccati.max_iter)
    lines = [f"# lqstab-riccati/1 converged={fmt(sol.converged)} iterations={sol.iterations}",
             f"# fixed_point_residual={fmt(sol.fixed_point_residual)} "
             f"lyapunov_residual={fmt(sol.lyapunov_residual)}"]
    noise = cfg.noise_model(theta)
    if noise is not None:
        lines.append(f"# optimal_average_cost={fmt(optimal_average_cost(sol.K, noise.C))}")
    if args.radius:
        radius = estimate_stabilizing_radius(theta, cfg.riccati.radius_samples, cfg.seed, cost)
        lines.append(f"# stabilizing_radius={fmt(radius)} samples={cfg.riccati.radius_samples}")
    lines += _matrix_lines("K", sol.K) + _matrix_lines("L", sol.L)
    _write_out("\n".join(lines) + "\n", args.output)


def _simulated(cfg):
    theta = cfg.system_params()
    x0 = cfg.simulate.x0 if cfg.simulate.x0 is not None else np.zeros(theta.p)
    return simulate(theta, cfg.feedback(theta), x0, cfg.simulate.n, cfg.noise_model(theta),
                    seed=cfg.seed, precision=cfg.simulate.precision)


def cmd_simulate(args):
    cfg = _load(args)
    _write_out(trajectory_to_csv(_simulated(cfg)), args.output)


def cmd_identify(args):
    if args.trajectory:
        traj = read_trajectory_csv(args.trajectory)
        rank_tol = 1e-8
        if args.config is not None:
            rank_tol = _load(args).algorithm.rank_tol
    else:
        cfg = _load(args)
        traj = _simulated(cfg)
        rank_tol = cfg.algorithm.rank_tol
    est = estimate_closed_loop(traj, rank_tol)
    lines = [f"# lqstab-identify/1 n={est.n} gram_min_eig={fmt(est.gram_min_eig)} "
             f"gram_log2_scale={est.gram_log2_scale}"]
    lines += _matrix_lines("D_hat", est.D_hat)
    _write_out("\n".join(lines) + "\n", args.output)


def _closed_loop_matrix(cfg, explicit):
    if explicit is not None:
        return np.array(explicit, dtype=float)
    theta = cfg.system_params()
    return theta.closed_loop(cfg.feedback(theta))


def _parse_matrix(text):
    try:
        M = np.array(yaml.safe_load(text), dtype=float)
    except (yaml.YAMLError, TypeError, ValueError):
        raise ConfigurationError(f"--matrix is not a numeric matrix: {text!r}") from None
    if M.ndim != 2:
        raise ConfigurationError("--matrix must be a nested list such as [[2,1],[0,2]]")
    return M


def cmd_spectral(args):
    if args.matrix is not None:
        D = _parse_matrix(args.matrix)
        rank_tol, unit_tol = 1e-8, 1e-6
        if args.config is not None:
            cfg = _load(args)
            rank_tol, unit_tol = cfg.algorithm.rank_tol, cfg.spectral.unit_tol
    else:
        cfg = _load(args)
        D = _closed_loop_matrix(cfg, cfg.spectral.matrix)
        rank_tol, unit_tol = cfg.algorithm.rank_tol, cfg.spectral.unit_tol
    _write_out(spectral_report(D, rank_tol, unit_tol).to_text(), args.output)


def cmd_stabilize(args):
    cfg = _load(args)
    theta = cfg.system_params()
    noise = cfg.noise_model(theta)
    alg = cfg.algorithm
    sset = run_stabilization(theta, noise, alg.epsilon0, alg.delta, cfg.sizing_params(noise),
                             seed=cfg.seed, x0=alg.x0, episode_length_override=alg.episode_length,
                             eps_floor=alg.eps_floor, max_redraws=alg.max_redraws,
                             rank_tol=alg.rank_tol)
    cert = certify(theta, sset.theta_hat, cfg.cost_matrices(theta))
    _write_out(sset.to_json(), args.output)
    print(f"empty={fmt(sset.empty)} certified={fmt(cert.stable)} "
          f"spectral_radius={fmt(cert.spectral_radius)} epsilon_tilde={fmt(sset.epsilon_tilde)}",
          file=sys.stderr if args.output in (None, "-") else sys.stdout)


def cmd_montecarlo(args):
    if args.replicates is not None:
        args.set = list(args.set or []) + [f"montecarlo.replicates={args.replicates}"]
    cfg = _load(args)
    report = run_montecarlo(cfg, resolve_workers(args.workers))
    if args.output in (None, "-"):
        sys.stdout.write(report_to_text(report))
    else:
        emit_report(report, args.output)
    agg = report.aggregate
    print(f"replicates={agg.replicates} frequency={fmt(agg.frequency)} "
          f"passes={fmt(agg.passes())}", file=sys.stderr)


def cmd_psi(args):
    cfg = _load(args)
    theta = cfg.system_params()
    noise = cfg.noise_model(theta)
    if noise is None:
        raise ConfigurationError("psi-estimate needs a noise model")
    D = _closed_loop_matrix(cfg, cfg.psi.matrix)
    psi = estimate_psi(D, noise, cfg.psi.delta, cfg.psi.n_steps, cfg.psi.n_mc, cfg.seed,
                       cfg.algorithm.rank_tol)
    _write_out(f"# lqstab-psi/1 delta={fmt(cfg.psi.delta)} n_steps={cfg.psi.n_steps} "
               f"n_mc={cfg.psi.n_mc} seed={cfg.seed}\npsi={fmt(psi)}\n", args.output)


def cmd_schema(args):
    _write_out(json.dumps(config_schema(), indent=2, sort_keys=True) + "\n", args.output)


def build_parser():
    parser = _Parser(prog="lqstab", description="LQ simulation, identification and "
                     "random-feedback stabilization toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. algorithm.delta=0.1")
        p.add_argument("--output", "-o", help="output path (default stdout)")
        p.set_defaults(func=func)
        return p

    p = add("riccati", cmd_riccati, "solve the Riccati equation by value iteration")
    p.add_argument("--radius", action="store_true", help="also estimate the stabilizing radius")
    add("simulate", cmd_simulate, "write a trajectory CSV")
    p = add("identify", cmd_identify, "least-squares closed-loop estimate")
    p.add_argument("--trajectory", help="trajectory CSV to fit instead of simulating")
    p = add("spectral", cmd_spectral, "eigenvalue and regularity report")
    p.add_argument("--matrix", help="matrix as a nested list, e.g. '[[2,1],[0,2]]'")
    add("stabilize", cmd_stabilize, "one stabilization run; writes the stabilizing set JSON")
    p = add("montecarlo", cmd_montecarlo, "replicated stabilization runs; writes a report CSV")
    p.add_argument("--workers", type=int,
                   help=f"worker processes (default ${WORKERS_ENV} or 1)")
    p.add_argument("--replicates", type=int, help="override montecarlo.replicates")
    add("psi-estimate", cmd_psi, "empirical quantile of the normalized Gram eigenvalue")
    add("schema", cmd_schema, "print the config JSON schema")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"lqstab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LQStabError as exc:
        print(f"lqstab: {exc.reason}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"lqstab: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
