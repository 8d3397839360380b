import json
import math
from pathlib import Path

import numpy as np
import pytest

from lqstab.errors import ConfigurationError
from lqstab.harness.cli import main
from lqstab.harness.config import apply_overrides, config_schema, parse_config
from lqstab.harness.montecarlo import evaluate_policy_cost, run_montecarlo
from lqstab.harness.parallel import WORKERS_ENV, pmap, resolve_workers
from lqstab.harness.report import (Aggregate, ReplicateRow, RunReport, clopper_pearson,
                                   emit_report, fmt, parse_report, report_to_text, table_to_text)
from lqstab.riccati import CostMatrices, optimal_average_cost, solve_dare
from lqstab.system import NoiseModel, SystemParams, read_trajectory_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
MINIMAL = {"system": {"A": [[1.3]], "B": [[1.0]]}}


def _square(x):
    return x * x


# configuration

def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.algorithm.epsilon0 == 0.5 and cfg.algorithm.delta == 0.05
    assert cfg.noise.kind == "gaussian" and cfg.montecarlo.replicates == 200
    echo = json.loads(cfg.echo())
    assert echo["system"]["A"] == [[1.3]] and echo["algorithm"]["episode_length"] == 2000
    assert cfg.echo() == parse_config(cfg.echo()).echo()


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    parse_config(str(path))


@pytest.mark.parametrize("patch,needle", [
    ({"algorithm": {"delta": 1.5}}, "algorithm.delta"),
    ({"cost": {"Q": [[-1.0]]}}, "cost"),
    ({"bogus": 1}, "bogus"),
    ({"algorithm": {"epsilon0": 0.5, "extra": 2}}, "algorithm.extra"),
    ({"system": {"A": [[1.0, 0.0]], "B": [[1.0]]}}, "system"),
    ({"algorithm": {"x0": [1.0, 2.0]}}, "x0"),
])
def test_invalid_configs_rejected(patch, needle):
    data = json.loads(json.dumps(MINIMAL))
    data.update(patch)
    with pytest.raises(ConfigurationError) as info:
        parse_config(data)
    assert needle in str(info.value)


def test_overrides():
    cfg = parse_config(MINIMAL, ["algorithm.delta=0.1", "seed=7", "montecarlo.replicates=3"])
    assert cfg.algorithm.delta == 0.1 and cfg.seed == 7 and cfg.montecarlo.replicates == 3
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["no-equals-sign"])
    with pytest.raises(ConfigurationError):
        parse_config(MINIMAL, ["seed.x=1"])


def test_generator_config():
    cfg = parse_config({"system": {"generator": "random-stabilizable", "p": 3, "r": 2,
                                   "generator_seed": 4}})
    th = cfg.system_params()
    assert (th.p, th.r) == (3, 2)
    assert th.theta.tolist() == cfg.system_params().theta.tolist()


def test_schema_lists_sections():
    props = config_schema()["properties"]
    for key in ("system", "noise", "cost", "algorithm", "riccati", "montecarlo"):
        assert key in props


# parallel helpers

def test_resolve_workers(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert resolve_workers() == 1
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert resolve_workers() == 3
    assert resolve_workers(2) == 2
    monkeypatch.setenv(WORKERS_ENV, "zero")
    with pytest.raises(ConfigurationError):
        resolve_workers()
    with pytest.raises(ConfigurationError):
        resolve_workers(0)


def test_pmap_preserves_order():
    assert pmap(_square, range(20), 3) == [x * x for x in range(20)]
    assert pmap(_square, [], 3) == []


# reports

def test_fmt():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(True) == "true" and fmt(math.nan) == "nan" and fmt((1, 2)) == "1;2"
    assert float(fmt(1 / 3)) == 1 / 3


def test_clopper_pearson_reference():
    # 95% interval for 8 of 10, from the beta quantile definition
    lo, hi = clopper_pearson(8, 10, 0.95)
    assert lo == pytest.approx(0.4439045376923585, abs=1e-12)
    assert hi == pytest.approx(0.9747892736731134, abs=1e-12)
    assert clopper_pearson(0, 5, 0.9)[0] == 0.0 and clopper_pearson(5, 5, 0.9)[1] == 1.0
    assert all(math.isnan(v) for v in clopper_pearson(0, 0, 0.9))


def test_aggregate_p_value():
    rows = [ReplicateRow(i, i, i != 0, "" if i else "cert-false", 0.5, 0.1, 0, (1,))
            for i in range(20)]
    agg = Aggregate.from_rows(rows, 0.99, 0.95)
    # P(X <= 19) for X ~ Bin(20, 0.95) = 1 - 0.95^20
    assert agg.p_value == pytest.approx(1 - 0.95 ** 20, abs=1e-12)
    assert agg.successes == 19 and dict(agg.failures)["cert-false"] == 1
    assert agg.passes()
    rows[1] = ReplicateRow(1, 1, False, "overflow", math.nan, 0.1, 0, (1,))
    worse = Aggregate.from_rows(rows, 0.99, 0.95)
    assert worse.frequency == 0.9 and not worse.passes()


def test_empty_report_is_header_only(tmp_path):
    agg = Aggregate.from_rows((), 0.99, 0.95)
    assert not agg.defined and math.isnan(agg.frequency)
    text = report_to_text(RunReport((), agg, "{}", "override"))
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert body == [",".join(("replicate", "seed", "success", "reason", "spectral_radius",
                              "epsilon_tilde", "redraws", "episode_lengths"))]
    assert "defined=false" in text and "frequency=nan" in text
    assert not agg.passes()


def test_report_roundtrip(tmp_path):
    cfg = parse_config(str(CONFIGS / "noise_free.yaml"), ["montecarlo.replicates=4"])
    report = run_montecarlo(cfg)
    path = tmp_path / "r.csv"
    emit_report(report, path)
    back = parse_report(path.read_text())
    assert back.rows == report.rows
    assert back.aggregate == report.aggregate
    assert report_to_text(back) == path.read_text()
    timing = (tmp_path / "r.csv.timing.csv").read_text().splitlines()
    assert timing[0] == "replicate,wall_time" and len(timing) == 5
    with pytest.raises(ValueError):
        parse_report("nonsense\n")


def test_reports_identical_across_worker_counts():
    cfg = parse_config(str(CONFIGS / "scalar.yaml"),
                       ["montecarlo.replicates=6", "algorithm.episode_length=200"])
    one = report_to_text(run_montecarlo(cfg, workers=1))
    three = report_to_text(run_montecarlo(cfg, workers=3))
    assert one == three


def test_montecarlo_failure_taxonomy():
    # zero initial state with no noise leaves every gram singular
    cfg = parse_config(str(CONFIGS / "noise_free.yaml"),
                       ["montecarlo.replicates=3", "algorithm.x0=null"])
    report = run_montecarlo(cfg)
    assert [row.reason for row in report.rows] == ["singular-gram"] * 3
    assert dict(report.aggregate.failures)["singular-gram"] == 3


def test_table_text():
    text = table_to_text("demo", ["a", "b"], [(1, 0.5), (2, math.nan)], {"seed": 3})
    assert text == "# lqstab-table/1 demo\n# seed=3\na,b\n1,0.5\n2,nan\n"


# policy cost

def test_evaluate_policy_cost_matches_riccati():
    th = SystemParams([[1.3]], [[1.0]])
    cost = CostMatrices.identity(1, 1)
    sol = solve_dare(th, cost)
    noise = NoiseModel.gaussian([[1.0]])
    mean, se = evaluate_policy_cost(th, sol.L, cost, noise, 4000, 40, seed=1, workers=2)
    assert abs(mean - optimal_average_cost(sol.K, noise.C)) < 4 * se + 0.02
    again = evaluate_policy_cost(th, sol.L, cost, noise, 4000, 40, seed=1, workers=1)
    assert again == (mean, se)


# command line

def _run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_riccati(capsys):
    code, out, _ = _run(["riccati", "-c", CONFIGS / "scalar.yaml"], capsys)
    assert code == 0 and "converged=true" in out and "optimal_average_cost=" in out
    lines = out.splitlines()
    K = float(lines[lines.index("K") + 1])
    from oracles import scalar_riccati
    assert K == pytest.approx(float(scalar_riccati(1.3, 1.0)), abs=1e-9)


def test_cli_simulate_and_identify(tmp_path, capsys):
    path = tmp_path / "traj.csv"
    code, _, _ = _run(["simulate", "-c", CONFIGS / "two_by_two.yaml", "--set", "simulate.n=300",
                       "-o", path], capsys)
    assert code == 0
    traj = read_trajectory_csv(path)
    assert traj.states.shape == (301, 2)
    code, out, _ = _run(["identify", "--trajectory", path], capsys)
    assert code == 0 and out.startswith("# lqstab-identify/1 n=300")
    D = np.array([[float(v) for v in ln.split()] for ln in out.splitlines()[2:]])
    cfg = parse_config(str(CONFIGS / "two_by_two.yaml"))
    th = cfg.system_params()
    np.testing.assert_allclose(D, th.closed_loop(cfg.feedback(th)), atol=0.2)
    np.testing.assert_allclose(traj.feedback, cfg.feedback(th), atol=1e-12)


def test_cli_spectral(capsys):
    code, out, _ = _run(["spectral", "--matrix", "[[2,1],[0,2]]"], capsys)
    assert code == 0 and "regular" in out


def test_cli_stabilize(tmp_path, capsys):
    path = tmp_path / "set.json"
    code, out, _ = _run(["stabilize", "-c", CONFIGS / "noise_free.yaml", "-o", path], capsys)
    assert code == 0 and "certified=true" in out
    data = json.loads(path.read_text())
    assert data["schema"] == "lqstab-stabilizing-set/1" and data["empty"] is False


def test_cli_montecarlo(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "2")
    path = tmp_path / "mc.csv"
    code, _, err = _run(["montecarlo", "-c", CONFIGS / "noise_free.yaml", "--replicates", 5,
                         "-o", path], capsys)
    assert code == 0 and "frequency=1" in err
    assert parse_report(path.read_text()).aggregate.replicates == 5
    assert (tmp_path / "mc.csv.timing.csv").exists()


def test_cli_psi(capsys):
    code, out, _ = _run(["psi-estimate", "-c", CONFIGS / "scalar.yaml", "--set", "psi.n_mc=100",
                         "--set", "simulate.feedback=optimal"], capsys)
    assert code == 0 and out.splitlines()[1].startswith("psi=")
    assert 0 < float(out.splitlines()[1][4:]) <= 1


def test_cli_schema(capsys):
    code, out, _ = _run(["schema"], capsys)
    assert code == 0 and "properties" in json.loads(out)


@pytest.mark.parametrize("argv,code", [
    (["stabilize"], 1),
    (["stabilize", "-c", "/nonexistent.yaml"], 1),
    (["montecarlo", "-c", str(CONFIGS / "scalar.yaml"), "--workers", "0"], 1),
    (["riccati", "-c", str(CONFIGS / "scalar.yaml"), "--set", "algorithm.delta=2"], 1),
    (["spectral", "--matrix", "[1, 2"], 1),
    (["no-such-command"], 1),
    (["stabilize", "-c", str(CONFIGS / "noise_free.yaml"), "--set", "algorithm.x0=null"], 2),
])
def test_cli_exit_codes(argv, code, capsys):
    with pytest.raises(SystemExit) if argv == ["no-such-command"] else _nullcontext() as exc:
        got = main(argv)
    if argv == ["no-such-command"]:
        assert exc.value.code == code
    else:
        assert got == code


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False
