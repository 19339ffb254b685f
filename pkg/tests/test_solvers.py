import csv

import numpy as np
import pytest

from neighbor_grpo.checks import marginal_z_scores, order_slope, sde_terminal_ensemble
from neighbor_grpo.mathcore import RngStream
from neighbor_grpo.solvers import (TimeSchedule, constant_eta_sigmas, dpmpp_step, euler_step, estimated_noise,
                                   rollout, sde_sigma_schedule, sde_step, uniform_schedule, write_trajectories_csv)
from neighbor_grpo.velocity import GaussianFlowOracle, VelocityModel
from oracles import two_sample_z


class Const:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)
        self.data_dim = self.v.size
        self.calls = 0

    def forward(self, x, t, c=None):
        self.calls += 1
        return np.broadcast_to(self.v, np.shape(x)).copy()


ORACLE = GaussianFlowOracle((1.0, -0.5), 0.5)


def terminal_error(solver, T, ref_T=1024, n=256):
    x1 = RngStream(0).gaussian(2 * n).reshape(n, 2)
    ref = rollout(ORACLE, solver, uniform_schedule(ref_T), x1).x0
    return np.max(np.abs(rollout(ORACLE, solver, uniform_schedule(T), x1).x0 - ref))


def test_schedule_validation():
    s = uniform_schedule(4)
    assert s.times == (1.0, 0.75, 0.5, 0.25, 0.0) and s.T == 4
    assert s.step(1) == (0.75, 0.25)
    for bad in [(1.0,), (0.9, 0.0), (1.0, 0.1), (1.0, 0.5, 0.5, 0.0)]:
        with pytest.raises(ValueError):
            TimeSchedule(bad)
    with pytest.raises(ValueError):
        uniform_schedule(0)
    shifted = uniform_schedule(8, shift=3.0)
    assert shifted.times[0] == 1.0 and shifted.times[-1] == 0.0


def test_euler_stub_example():
    np.testing.assert_allclose(euler_step(Const([2.0]), np.array([1.0]), 0.5, 0.1), [0.8], rtol=1e-15)


def test_euler_zero_field_and_errors():
    x = np.array([0.3, -0.7])
    assert np.array_equal(euler_step(Const([0.0, 0.0]), x, 0.5, 0.25), x)
    for dt in (0.0, -0.1):
        with pytest.raises(ValueError):
            euler_step(Const([0.0]), np.zeros(1), 0.5, dt)
    with pytest.raises(ValueError):
        euler_step(Const([0.0]), np.zeros(1), 0.2, 0.5)


def test_euler_error_halves():
    ratio = terminal_error("euler", 64) / terminal_error("euler", 128)
    assert 2 * 0.75 <= ratio <= 2 * 1.25


def test_dpmpp_error_quarters():
    ratio = terminal_error("dpmpp", 32) / terminal_error("dpmpp", 64)
    assert 4 * 0.7 <= ratio <= 4 * 1.3


def test_order_slopes_against_exact_flow():
    assert abs(order_slope("euler")[0] - 1.0) <= 0.25
    assert abs(order_slope("dpmpp")[0] - 2.0) <= 0.3


def test_dpmpp_exact_on_constant_field():
    # a constant field is the straight path x_t = x_1 - (1 - t) v
    v = np.array([0.7, -1.3])
    x1 = np.array([0.2, 0.4])
    for T in (1, 2, 5, 13):
        x0 = rollout(Const(v), "dpmpp", uniform_schedule(T), x1).x0
        np.testing.assert_allclose(x0, x1 - v, rtol=0, atol=1e-14)


def test_dpmpp_first_step_is_euler_and_rejects_bad_dt():
    x = np.array([0.3, 0.1])
    m = VelocityModel.initialized(2, RngStream(0))
    nxt, (t, x0_hat) = dpmpp_step(m, None, x, 1.0, 0.25)
    assert np.array_equal(nxt, euler_step(m, x, 1.0, 0.25))
    np.testing.assert_allclose(x0_hat, x - m.forward(x, 1.0), rtol=1e-15)
    with pytest.raises(ValueError):
        dpmpp_step(m, None, x, 1.0, 0.0)


@pytest.mark.parametrize("solver, T", [("dpmpp", 8), ("euler", 25), ("dpmpp", 16)])
def test_nfe_equals_step_count(solver, T):
    model = Const([1.0])
    tr = rollout(model, solver, uniform_schedule(T), np.zeros(1))
    assert tr.nfe == T and model.calls == T
    assert tr.states.shape == (T + 1, 1)


def test_single_step_rollout():
    m = VelocityModel.initialized(2, RngStream(3))
    x1 = np.array([0.5, -0.5])
    tr = rollout(m, "euler", uniform_schedule(1), x1)
    np.testing.assert_allclose(tr.x0, x1 - m.forward(x1, 1.0), rtol=1e-15)


def test_rollout_rejects_bad_inputs():
    with pytest.raises(ValueError):
        rollout(Const([0.0]), "rk4", uniform_schedule(2), np.zeros(1))
    with pytest.raises(ValueError):
        rollout(VelocityModel(2), "euler", uniform_schedule(2), np.zeros(3))
    with pytest.raises(ValueError):
        rollout(Const([0.0]), "sde", uniform_schedule(2), np.zeros(1), sigmas=[0.1, 0.0])


def test_sde_zero_sigma_is_euler():
    m = VelocityModel.initialized(2, RngStream(1))
    x = np.array([0.4, 0.9])
    nxt, ode, _ = sde_step(m, x, 0.6, 0.1, 0.0)
    assert np.array_equal(nxt, euler_step(m, x, 0.6, 0.1))
    assert np.array_equal(ode, nxt)


def test_sde_worked_example():
    x = np.array([2.0])
    nxt, ode, eps_hat = sde_step(Const([1.0]), x, 0.5, 0.1, 0.2, noise=np.zeros(1))
    np.testing.assert_allclose(eps_hat, [2.5], rtol=1e-15)
    np.testing.assert_allclose(ode - nxt, [0.1], rtol=1e-13)
    np.testing.assert_allclose(estimated_noise(x, 0.5, np.array([1.0])), [2.5])


def test_sde_errors():
    with pytest.raises(ValueError):
        sde_step(Const([0.0]), np.zeros(1), 0.0, 0.1, 0.2, noise=np.zeros(1))
    with pytest.raises(ValueError):
        sde_step(Const([0.0]), np.zeros(1), 0.5, 0.1, -0.1)
    with pytest.raises(ValueError):
        sde_step(Const([0.0]), np.zeros(1), 0.5, 0.1, 0.1)


def test_sde_rollout_determinism():
    m = VelocityModel.initialized(2, RngStream(2))
    s = uniform_schedule(10)
    sig = sde_sigma_schedule(s, 0.7)
    a = rollout(m, "sde", s, np.array([0.1, 0.2]), rng=RngStream(5), sigmas=sig)
    b = rollout(m, "sde", s, np.array([0.1, 0.2]), rng=RngStream(5), sigmas=sig)
    c = rollout(m, "sde", s, np.array([0.1, 0.2]), rng=RngStream(6), sigmas=sig)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.noises, b.noises)
    assert not np.array_equal(a.states, c.states)


def test_sigma_schedules_end_deterministic():
    s = uniform_schedule(16)
    sig = sde_sigma_schedule(s, 5.0)
    assert sig[-1] == 0.0 and np.all(sig >= 0) and np.all(sig <= 0.5)
    eta = constant_eta_sigmas(s, 0.3)
    np.testing.assert_allclose(eta[:-1], 0.3 * np.sqrt(1 / 16))
    assert eta[-1] == 0.0


def _sde_and_ode(T, n=50_000, seed=1):
    o = GaussianFlowOracle((0.5,), 0.8)
    s = uniform_schedule(T)
    rng = RngStream(seed)
    x1 = rng.gaussian(n).reshape(n, 1)
    sde = rollout(o, "sde", s, x1, rng=rng.fork(1), sigmas=constant_eta_sigmas(s, 0.3)).x0[:, 0]
    ode = rollout(o, "euler", s, RngStream(seed + 1000).gaussian(n).reshape(n, 1)).x0[:, 0]
    return sde, ode


def test_sde_marginal_matches_ode_ensemble_t64():
    sde, ode = _sde_and_ode(64)
    z_mean, z_var = two_sample_z(sde, ode)
    assert abs(z_mean) <= 3 and abs(z_var) <= 3


@pytest.mark.xfail(strict=True, reason="Euler bias at T=64 exceeds 3 MC std errors of the variance; "
                                       "the closed-form comparison is made at T=1024 instead")
def test_sde_marginal_closed_form_t64():
    sde, _ = _sde_and_ode(64)
    z_mean, z_var = marginal_z_scores(sde, 0.5, 0.64)
    assert abs(z_mean) <= 3 and abs(z_var) <= 3


@pytest.mark.slow
def test_sde_marginal_closed_form_t1024():
    x0 = sde_terminal_ensemble(GaussianFlowOracle((0.5,), 0.8), 50_000, 1024, seed=1)[:, 0]
    z_mean, z_var = marginal_z_scores(x0, 0.5, 0.64)
    assert abs(z_mean) <= 3 and abs(z_var) <= 3


def test_trajectory_csv(tmp_path):
    m = VelocityModel.initialized(2, RngStream(0))
    trs = [rollout(m, "euler", uniform_schedule(3), np.array([0.1 * i, 0.2])) for i in range(2)]
    path = tmp_path / "traj.csv"
    write_trajectories_csv(path, trs)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["traj_id", "step", "t", "x0", "x1", "nfe_cumulative"]
    assert len(rows) == 1 + 2 * 4
    assert float(rows[-1][2]) == 0.0 and rows[-1][-1] == "3"
    assert float(rows[5][3]) == trs[1].states[0, 0]
