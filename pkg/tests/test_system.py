import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lqstab.errors import ConfigurationError, DimensionError, SimulationOverflow
from lqstab.system import (NoiseModel, SystemParams, Trajectory, average_cost,
                           random_stabilizable, sample_noise, simulate, spectral_radius,
                           trajectory_from_csv, trajectory_to_csv)

# 2 * (1 - Phi(3)), from numerical integration of the normal density (scipy.integrate.quad)
GAUSS_TAIL_3 = 0.0026997960632601926


def test_system_params_validation():
    with pytest.raises(DimensionError):
        SystemParams(np.ones((2, 3)), np.ones((2, 1)))
    with pytest.raises(DimensionError):
        SystemParams(np.eye(2), np.ones((3, 1)))
    with pytest.raises(ConfigurationError):
        SystemParams([[np.inf]], [[1.0]])
    th = SystemParams(np.eye(2), np.ones((2, 3)))
    assert (th.p, th.r, th.q) == (2, 3, 5)
    assert th.theta.shape == (2, 5)
    assert SystemParams.from_theta(th.theta, 2) == th


def test_nilpotent_one_step():
    th = SystemParams(np.zeros((3, 3)), np.zeros((3, 2)))
    tr = simulate(th, np.zeros((2, 3)), [1.0, -2.0, 3.0], 5)
    assert np.all(tr.states[1:] == 0)


def test_identity_dynamics():
    v = np.array([0.3, -1.7])
    tr = simulate(SystemParams(np.eye(2), np.zeros((2, 1))), np.zeros((1, 2)), v, 6)
    assert np.all(tr.states == v)


def test_scalar_geometric_decay():
    tr = simulate(SystemParams([[2.0]], [[1.0]]), [[-1.5]], [1.0], 3)
    assert tr.states[:, 0].tolist() == [1.0, 0.5, 0.25, 0.125]
    assert tr.inputs[:, 0].tolist() == [-1.5, -0.75, -0.375]


def test_simulate_dimension_errors():
    th = SystemParams(np.eye(2), np.ones((2, 1)))
    with pytest.raises(DimensionError):
        simulate(th, np.zeros((2, 2)), [0, 0], 3)
    with pytest.raises(DimensionError):
        simulate(th, np.zeros((1, 2)), [0, 0, 0], 3)
    with pytest.raises(DimensionError):
        simulate(th, np.zeros((1, 2)), [0, 0], 3, NoiseModel.gaussian(np.eye(3)))
    with pytest.raises(ConfigurationError):
        simulate(th, np.zeros((1, 2)), [0, 0], 0)
    with pytest.raises(ConfigurationError):
        simulate(th, np.zeros((1, 2)), [0, 0], 3, precision="double")


def test_overflow_names_step():
    # powers of 4 are exact; 4**499 is the first above 1e300
    th = SystemParams([[4.0]], [[0.0]])
    with pytest.raises(SimulationOverflow) as info:
        simulate(th, [[0.0]], [1.0], 600)
    assert info.value.step == 499
    assert "step 499" in str(info.value)


def test_overflow_cap_configurable():
    with pytest.raises(SimulationOverflow) as info:
        simulate(SystemParams([[2.0]], [[0.0]]), [[0.0]], [1.0], 20, cap=100.0)
    assert info.value.step == 7


def test_determinism_and_streams():
    th = SystemParams([[0.5, 0.1], [0.0, 0.7]], np.eye(2))
    nz = NoiseModel.gaussian(np.eye(2))
    a = simulate(th, np.zeros((2, 2)), [0, 0], 50, nz, seed=11)
    b = simulate(th, np.zeros((2, 2)), [0, 0], 50, nz, seed=11)
    c = simulate(th, np.zeros((2, 2)), [0, 0], 50, nz, seed=12)
    assert trajectory_to_csv(a) == trajectory_to_csv(b)
    assert not np.array_equal(a.states, c.states)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31), st.integers(1, 30))
def test_closed_loop_linearity(p, r, seed, n):
    rng = np.random.default_rng(seed)
    th = SystemParams(rng.standard_normal((p, p)) * 0.5, rng.standard_normal((p, r)))
    L = rng.standard_normal((r, p)) * 0.3
    x0 = rng.standard_normal(p)
    tr = simulate(th, L, x0, n)
    D = th.A + th.B @ L
    x = x0.copy()
    for t in range(n):
        np.testing.assert_allclose(tr.inputs[t], L @ tr.states[t], rtol=1e-12, atol=1e-12)
        x = D @ x
        np.testing.assert_allclose(tr.states[t + 1], x, rtol=1e-10, atol=1e-12)


def test_exact_precision_matches_float_when_stable():
    th = SystemParams([[0.5, 0.2], [-0.1, 0.4]], np.eye(2))
    nz = NoiseModel.gaussian(np.eye(2))
    a = simulate(th, np.zeros((2, 2)), [1.0, 2.0], 200, nz, seed=3)
    b = simulate(th, np.zeros((2, 2)), [1.0, 2.0], 200, nz, seed=3, precision="exact")
    np.testing.assert_allclose(b.true_states(), a.states, rtol=0, atol=1e-14)
    assert b.fixed_states is not None and len(b.fixed_states) == 201


def test_exact_precision_runs_past_float_cap():
    th = SystemParams([[1.5]], [[0.0]])
    with pytest.raises(SimulationOverflow):
        simulate(th, [[0.0]], [1.0], 2000, NoiseModel.gaussian([[1.0]]))
    tr = simulate(th, [[0.0]], [1.0], 2000, NoiseModel.gaussian([[1.0]]), precision="exact")
    assert tr.is_scaled
    assert np.all(np.isfinite(tr.states))


def test_exact_continuation_is_seamless():
    th = SystemParams([[1.1, 0.3], [0.0, 0.8]], np.eye(2))
    nz = NoiseModel.gaussian(np.eye(2))
    first = simulate(th, np.zeros((2, 2)), [0, 0], 40, nz, seed=5, precision="exact",
                     noise_keys=(0,))
    second = simulate(th, np.zeros((2, 2)), first.fixed_states[-1], 40, nz, seed=5,
                      precision="exact", noise_keys=(1,))
    assert second.fixed_states[0] == first.fixed_states[-1]
    with pytest.raises(ConfigurationError):
        simulate(th, np.zeros((2, 2)), first.fixed_states[-1], 5)


def test_segment():
    tr = simulate(SystemParams([[0.5]], [[1.0]]), [[0.1]], [1.0], 10)
    seg = tr.segment(3, 7)
    assert seg.n == 4
    np.testing.assert_array_equal(seg.states, tr.states[3:8])
    with pytest.raises(DimensionError):
        tr.segment(5, 11)


def test_noise_validation():
    with pytest.raises(ConfigurationError):
        NoiseModel.gaussian([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ConfigurationError):
        NoiseModel.gaussian([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ConfigurationError):
        NoiseModel("cauchy", [[1.0]])
    with pytest.raises(ConfigurationError):
        NoiseModel.weibull(-1.0, [[1.0]])
    with pytest.raises(ConfigurationError):
        NoiseModel("gaussian", [[1.0]], alpha=1.0)
    assert NoiseModel.gaussian([[1.0]]).alpha == 2
    assert math.isinf(NoiseModel.uniform([[1.0]]).alpha)


def test_uniform_bounded_support():
    C = np.array([[2.0, 0.5], [0.5, 1.0]])
    nz = NoiseModel.uniform(C)
    w = sample_noise(nz, 0, 20000)
    assert np.abs(w).max() <= nz.support_radius
    assert np.all(nz.tail_bound(np.array([nz.support_radius])) == 0)


def test_gaussian_tail_probability():
    w = sample_noise(NoiseModel.gaussian([[1.0]]), 2024, 1_000_000)[:, 0]
    freq = np.mean(np.abs(w) > 3)
    se = math.sqrt(GAUSS_TAIL_3 * (1 - GAUSS_TAIL_3) / w.size)
    assert abs(freq - GAUSS_TAIL_3) <= 3 * se


def test_weibull_unit_scale_mean():
    # covariance Gamma(1 + 2/alpha) = 24 undoes the standardization, leaving sign * E**2
    nz = NoiseModel.weibull(0.5, [[24.0]])
    w = np.abs(sample_noise(nz, 7, 400_000)[:, 0])
    se = w.std() / math.sqrt(w.size)
    assert abs(w.mean() - 2.0) <= 4 * se


@pytest.mark.parametrize("noise", [
    NoiseModel.gaussian([[2.0, 0.6], [0.6, 1.0]]),
    NoiseModel.weibull(0.7, [[1.0, -0.3], [-0.3, 0.5]]),
    NoiseModel.weibull(3.0, [[1.5, 0.0], [0.0, 0.5]]),
    NoiseModel.uniform([[1.0, 0.2], [0.2, 0.8]]),
], ids=["gaussian", "weibull-heavy", "weibull-light", "uniform"])
def test_noise_moments(noise):
    n = 200_000
    w = sample_noise(noise, 99, n)
    mean_se = np.sqrt(np.diag(noise.C) / n)
    assert np.all(np.abs(w.mean(axis=0)) <= 5 * mean_se)
    cov = np.cov(w.T)
    # standard error of each covariance entry from fourth moments
    prods = np.einsum("ti,tj->tij", w, w)
    cov_se = prods.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(cov - noise.C) <= 5 * cov_se + 1e-12)


@pytest.mark.parametrize("noise", [
    NoiseModel.gaussian([[2.0, 0.6], [0.6, 1.0]]),
    NoiseModel.weibull(0.5, [[1.0, 0.4], [0.4, 1.0]]),
    NoiseModel.weibull(1.5, [[1.0]]),
    NoiseModel.uniform([[1.0, 0.3], [0.3, 1.0]]),
], ids=["gaussian", "weibull-0.5", "weibull-1.5", "uniform"])
def test_tail_bound_holds(noise):
    n = 200_000
    w = np.abs(sample_noise(noise, 5, n))
    scale = math.sqrt(noise.C.diagonal().max())
    for y in scale * np.array([0.5, 1.0, 2.0, 3.0, 5.0, 8.0]):
        bound = float(np.clip(noise.tail_bound(y), 0, 1))
        for i in range(noise.p):
            freq = np.mean(w[:, i] > y)
            se = math.sqrt(max(freq * (1 - freq), 1.0 / n) / n)
            assert freq <= bound + 3 * se


def test_spectral_radius():
    assert spectral_radius(np.eye(3)) == pytest.approx(1.0)
    assert spectral_radius(np.diag([0.5, -1.5])) == pytest.approx(1.5)
    assert spectral_radius(2 * np.array([[0.0, -1.0], [1.0, 0.0]])) == pytest.approx(2.0)
    with pytest.raises(DimensionError):
        spectral_radius(np.ones((2, 3)))


def test_average_cost():
    zero = Trajectory(np.zeros((5, 2)), np.zeros((4, 1)))
    assert average_cost(zero, np.eye(2), np.eye(1)) == 0.0
    single = Trajectory([[1.0], [1.0]], [[0.0]])
    assert average_cost(single, [[1.0]], [[1.0]]) == 1.0
    with pytest.raises(DimensionError):
        average_cost(single, np.eye(2), [[1.0]])


def test_average_cost_uses_feedback_for_last_input():
    tr = simulate(SystemParams([[2.0]], [[1.0]]), [[-1.5]], [1.0], 2)
    # x(1)=0.5, x(2)=0.25; u(1)=-0.75, u(2)=-0.375
    expected = ((0.25 + 0.5625) + (0.0625 + 0.140625)) / 2
    assert average_cost(tr, [[1.0]], [[1.0]]) == pytest.approx(expected, rel=1e-15)


def test_trajectory_csv_roundtrip():
    th = SystemParams([[0.5, 0.1], [0.0, 0.3]], np.ones((2, 1)))
    tr = simulate(th, [[0.1, -0.2]], [1.0, 1.0], 5, NoiseModel.gaussian(np.eye(2)), seed=4)
    text = trajectory_to_csv(tr)
    lines = text.splitlines()
    header = [ln for ln in lines if not ln.startswith("#")][0]
    assert header == "t,x_1,x_2,u_1"
    assert lines[-1].endswith(",")  # no input on the last row
    back = trajectory_from_csv(text)
    assert back == tr
    assert back.seed == 4
    np.testing.assert_array_equal(back.feedback, tr.feedback)


def test_scaled_trajectory_csv_roundtrip():
    tr = simulate(SystemParams([[1.5]], [[0.0]]), [[0.0]], [1.0], 2000,
                  NoiseModel.gaussian([[1.0]]), seed=1, precision="exact")
    back = trajectory_from_csv(trajectory_to_csv(tr))
    np.testing.assert_array_equal(back.states, tr.states)
    np.testing.assert_array_equal(back.exponents, tr.exponents)


def test_random_stabilizable():
    th, L = random_stabilizable(3, 2, seed=1)
    assert spectral_radius(th.closed_loop(L)) == pytest.approx(0.9)
    th, L = random_stabilizable(3, 2, seed=1, b_rank=1)
    assert np.linalg.matrix_rank(th.B) == 1
