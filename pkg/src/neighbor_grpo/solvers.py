"""Samplers for the rectified-flow ODE and its marginal-matching SDE.

Time runs from 1 (noise) down to 0 (data). A schedule of ``T`` steps holds
``T + 1`` strictly decreasing times starting at exactly 1 and ending at
exactly 0. Any object with ``forward(x, t, c)`` works as the velocity field.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .mathcore import RngStream

SOLVERS = ("euler", "dpmpp", "sde")


@dataclass(frozen=True)
class TimeSchedule:
    times: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        if len(ts) < 2:
            raise ValueError("schedule needs at least one step")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise ValueError("schedule must start at 1 and end at 0")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("schedule must be strictly decreasing")
        object.__setattr__(self, "times", ts)

    @property
    def T(self) -> int:
        return len(self.times) - 1

    def step(self, k: int) -> tuple[float, float]:
        """``(t, dt)`` of the k-th transition (0-based from the noise end)."""
        t = self.times[k]
        return t, t - self.times[k + 1]


def uniform_schedule(T: int, shift: float | None = None) -> TimeSchedule:
    """``T`` equal steps; ``shift`` warps times as ``s t / (1 + (s - 1) t)``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    ts = [1.0 - k / T for k in range(T + 1)]
    ts[-1] = 0.0
    if shift is not None:
        ts = [shift * t / (1 + (shift - 1) * t) for t in ts]
    return TimeSchedule(tuple(ts))


@dataclass
class Trajectory:
    """States from noise to data. ``states[k]`` sits at ``times[k]``."""

    times: tuple
    states: np.ndarray
    nfe: int
    solver: str = "euler"
    # SDE rollouts only: injected noise, noise scale, deterministic point and
    # estimated initial noise, one entry per step
    noises: np.ndarray | None = None
    sigmas: np.ndarray | None = None
    ode_points: np.ndarray | None = None
    eps_hats: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]


def euler_step(model, x_t, t: float, dt: float, c=None) -> np.ndarray:
    """``x_{t-dt} = x_t - dt * v(x_t, t)`` (one model evaluation)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t - dt < -1e-12:
        raise ValueError("step would pass t = 0")
    return np.asarray(x_t, dtype=float) - dt * model.forward(x_t, t, c)


def dpmpp_step(model, history, x_t, t: float, dt: float, c=None):
    """Second-order multistep step in the data-prediction parameterization.

    ``history`` is ``None`` or the ``(t_prev, x0_prev)`` record returned by the
    previous call; the return value is ``(x_next, (t, x0_hat))`` with
    ``x0_hat = x_t - t v(x_t, t)``.

    On the straight path ``d(x/t)/dt = -x0_hat / t**2`` holds exactly, so
    integrating with ``x0_hat`` extrapolated linearly in time through the last
    two predictions gives, for ``t' = t - dt``::

        x_next = (t'/t) x_t + (1 - t'/t) x0_hat + g (t' log(t/t') + t' - t)

    where ``g`` is the backward-difference slope of ``x0_hat``. This is the
    2M scheme written in t instead of log-SNR, which stays finite at both
    endpoints of the schedule. Without history the step is a plain Euler step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x_t = np.asarray(x_t, dtype=float)
    t_next = max(t - dt, 0.0)
    v = model.forward(x_t, t, c)
    x0_hat = x_t - t * v
    if history is None:
        return x_t - dt * v, (t, x0_hat)
    t_prev, x0_prev = history
    g = (x0_hat - x0_prev) / (t - t_prev)
    corr = t_next - t + (t_next * math.log(t / t_next) if t_next > 0 else 0.0)
    ratio = t_next / t
    return ratio * x_t + (1 - ratio) * x0_hat + corr * g, (t, x0_hat)


def estimated_noise(x_t, t, v):
    """``x_t + (1 - t) v``: the initial noise implied by the velocity."""
    return x_t + (1 - t) * v


def sde_step(model, x_t, t: float, dt: float, sigma_t: float, rng: RngStream | None = None,
             c=None, noise=None):
    """Marginal-preserving stochastic step.

    ``x_next = x_ode - sigma_t**2 / (2 t) * eps_hat + sigma_t * noise`` with
    ``x_ode`` the Euler point. ``noise`` is drawn from ``rng`` unless given.
    Returns ``(x_next, x_ode, eps_hat)``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if sigma_t < 0:
        raise ValueError("sigma_t must be nonnegative")
    if sigma_t > 0 and t <= 0:
        raise ValueError("stochastic step needs t > 0")
    x_t = np.asarray(x_t, dtype=float)
    v = model.forward(x_t, t, c)
    x_ode = x_t - dt * v
    eps_hat = estimated_noise(x_t, t, v)
    if sigma_t == 0:
        return x_ode, x_ode, eps_hat
    if noise is None:
        if rng is None:
            raise ValueError("stochastic step needs an rng or explicit noise")
        noise = rng.gaussian(x_t.size).reshape(x_t.shape)
    x_next = x_ode - (sigma_t**2 / (2 * t)) * eps_hat + sigma_t * noise
    return x_next, x_ode, eps_hat


def sde_sigma_schedule(schedule: TimeSchedule, a: float, eps_s: float = 0.05,
                       max_sigma: float = 0.5) -> np.ndarray:
    """Per-step noise ``a * sqrt(t / (1 - t + eps_s)) * sqrt(dt)`` clipped.

    The last step (into t = 0) is always deterministic.
    """
    out = np.zeros(schedule.T)
    for k in range(schedule.T - 1):
        t, dt = schedule.step(k)
        out[k] = min(max(a * math.sqrt(t / (1 - t + eps_s)) * math.sqrt(dt), 0.0), max_sigma)
    return out


def constant_eta_sigmas(schedule: TimeSchedule, eta: float) -> np.ndarray:
    """``sigma_t = eta * sqrt(dt)``, deterministic final step."""
    out = np.array([eta * math.sqrt(schedule.step(k)[1]) for k in range(schedule.T)])
    out[-1] = 0.0
    return out


def rollout(model, solver: str, schedule: TimeSchedule, x_1, c=None, rng: RngStream | None = None,
            sigmas=None) -> Trajectory:
    """Integrate from ``x_1`` at t = 1 to t = 0.

    ``x_1`` may be one vector or an ``(n, d)`` batch; ``nfe`` counts velocity
    evaluations per trajectory. Nothing here records gradients.
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    x = np.array(x_1, dtype=float)
    if x.shape[-1] != getattr(model, "data_dim", x.shape[-1]):
        raise ValueError("x_1 does not match the model data dimension")
    T = schedule.T
    states = np.empty((T + 1, *x.shape))
    states[0] = x
    traj = Trajectory(schedule.times, states, 0, solver)
    if solver == "sde":
        sigmas = np.zeros(T) if sigmas is None else np.asarray(sigmas, dtype=float)
        if sigmas.shape != (T,):
            raise ValueError("need one sigma per step")
        traj.sigmas = sigmas
        traj.noises = np.zeros((T, *x.shape))
        traj.ode_points = np.empty((T, *x.shape))
        traj.eps_hats = np.empty((T, *x.shape))
    history = None
    for k in range(T):
        t, dt = schedule.step(k)
        if solver == "euler":
            x = euler_step(model, x, t, dt, c)
        elif solver == "dpmpp":
            x, history = dpmpp_step(model, history, x, t, dt, c)
        else:
            noise = None
            if sigmas[k] > 0:
                if rng is None:
                    raise ValueError("SDE rollout needs an rng")
                noise = rng.gaussian(x.size).reshape(x.shape)
                traj.noises[k] = noise
            x, traj.ode_points[k], traj.eps_hats[k] = sde_step(model, x, t, dt, sigmas[k], c=c, noise=noise)
        traj.nfe += 1
        states[k + 1] = x
    return traj


def write_trajectories_csv(path, trajectories) -> None:
    """Columns: traj_id, step, t, x0..x{d-1}, nfe_cumulative (one row per state)."""
    trajectories = list(trajectories)
    d = trajectories[0].states.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "step", "t", *[f"x{j}" for j in range(d)], "nfe_cumulative"])
        for tid, tr in enumerate(trajectories):
            if tr.states.ndim != 2:
                raise ValueError("dump expects single (unbatched) trajectories")
            for k, (t, x) in enumerate(zip(tr.times, tr.states)):
                w.writerow([tid, k, repr(t), *[repr(float(v)) for v in x], k])
