"""Neighbor GRPO: GRPO over a bundle of deterministic ODE trajectories.

A group is built by perturbing one base noise, every member is integrated
deterministically, and the policy needed by GRPO is the training-only
softmax over negative squared distances between a gradient-carrying anchor
point and the (stop-gradient) group states.

Step indices: a schedule of ``T`` steps has transitions ``s = 0 .. T-1``
counted from the noise end, transition ``s`` going from ``times[s]`` to
``times[s+1]``. Training uses the ``T - 1`` transitions that end at t > 0.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grpo import clipped_terms, compute_advantages
from .mathcore import Adam, RngStream, log_softmax_neg
from .solvers import TimeSchedule, Trajectory, rollout, uniform_schedule

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Training produced a non-finite value."""


@dataclass
class TrainLoopConfig:
    G: int = 12
    B: int = 4
    K: int = 4
    T: int = 8
    sigma: float = 0.3
    p: float = 0.8
    clip_eps: float = 1e-4
    lr: float = 3e-4
    iterations: int = 300
    rollout_solver: str = "dpmpp"
    train_solver: str = "euler"
    advantage_mode: str = "quasi_norm"
    std_ddof: int = 0
    beta_kl: float = 0.0
    temperature: float | None = None
    exclude_self: bool = False
    per_anchor_update: bool = True
    resample_steps_per_anchor: bool = False
    # "auto": stored state for Euler rollouts, Euler recomputation under the
    # old model for DPM++ rollouts (the stored DPM++ point is not what the
    # one-step training policy would produce, so ratios would start off 1)
    old_anchor: str = "auto"
    # SDE baseline knobs
    sde_a: float = 0.7
    sde_eps_s: float = 0.05
    sde_max_sigma: float = 0.5
    sde_advantage_mode: str = "standard"
    sde_window: int | None = None
    sde_window_stride: int = 25

    def validate(self) -> "TrainLoopConfig":
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if not 1 <= self.B <= self.G:
            raise ValueError("need 1 <= B <= G")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 1 <= self.K <= self.T - 1:
            raise ValueError("need 1 <= K <= T - 1")
        if not 0 < self.sigma <= 1:
            raise ValueError("sigma must lie in (0, 1]")
        if not 0 < self.p <= 2:
            raise ValueError("p must lie in (0, 2]")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if self.lr < 0 or self.iterations < 0:
            raise ValueError("lr and iterations must be nonnegative")
        if self.rollout_solver not in ("euler", "dpmpp"):
            raise ValueError("rollout_solver must be euler or dpmpp")
        if self.train_solver != "euler":
            raise ValueError("train_solver must be euler (one-step DDIM)")
        if self.advantage_mode not in ("standard", "quasi_norm"):
            raise ValueError("bad advantage_mode")
        if self.sde_advantage_mode not in ("standard", "quasi_norm"):
            raise ValueError("bad sde_advantage_mode")
        if self.old_anchor not in ("auto", "stored", "recompute"):
            raise ValueError("old_anchor must be auto, stored or recompute")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.sde_window is not None and not 1 <= self.sde_window <= self.T - 1:
            raise ValueError("sde_window must lie in [1, T-1]")
        return self

    @property
    def resolved_old_anchor(self) -> str:
        if self.old_anchor != "auto":
            return self.old_anchor
        return "stored" if self.rollout_solver == "euler" else "recompute"

    @property
    def nfe_theta(self) -> float:
        return self.B / self.G * self.K


# ---------------------------------------------------------------------------
# neighborhood and policy


@dataclass
class NoiseGroup:
    eps_star: np.ndarray
    sigma: float
    members: np.ndarray
    deltas: np.ndarray


def perturb_noise(eps_star, sigma: float, G: int, rng: RngStream) -> NoiseGroup:
    """``eps_i = sqrt(1 - sigma^2) eps_star + sigma delta_i`` for G fresh deltas.

    ``sigma = 1`` gives G independent noises.
    """
    if not 0 < sigma <= 1:
        raise ValueError("sigma must lie in (0, 1]")
    if G < 2:
        raise ValueError("G must be >= 2")
    eps_star = np.asarray(eps_star, dtype=float)
    deltas = rng.gaussian(G * eps_star.size).reshape(G, eps_star.size)
    members = math.sqrt(1 - sigma**2) * eps_star + sigma * deltas
    return NoiseGroup(eps_star, sigma, members, deltas)


@dataclass
class LeapPolicy:
    probs: np.ndarray
    log_probs: np.ndarray
    dists_sq: np.ndarray
    anchor: np.ndarray
    temperature: float = 1.0


def leap_policy(group_states, anchor, temperature: float | None = None) -> LeapPolicy:
    """Softmax over ``-||x_i - anchor||^2 / temperature`` (temperature 1 by default)."""
    X = np.asarray(group_states, dtype=float)
    a = np.asarray(anchor, dtype=float)
    if X.ndim != 2 or X.shape[1] != a.shape[-1]:
        raise ValueError("dimension mismatch between group states and anchor")
    tau = 1.0 if temperature is None else temperature
    d2 = np.sum((X - a) ** 2, axis=1)
    logp = log_softmax_neg(d2 / tau)
    return LeapPolicy(np.exp(logp), logp, d2, a, tau)


# ---------------------------------------------------------------------------
# group rollout


@dataclass
class GroupRollout:
    trajectories: list
    c: np.ndarray | None
    schedule: TimeSchedule
    rewards: np.ndarray | None = None
    noise_group: NoiseGroup | None = None
    states: np.ndarray = field(init=False)

    def __post_init__(self):
        # (T + 1, G, d)
        self.states = np.stack([tr.states for tr in self.trajectories], axis=1)

    @property
    def G(self) -> int:
        return len(self.trajectories)

    @property
    def nfe(self) -> int:
        return sum(tr.nfe for tr in self.trajectories)


def rollout_group(model, x1s, schedule: TimeSchedule, solver: str, c=None,
                  workers: int | None = None) -> list[Trajectory]:
    """One deterministic rollout per member.

    Members are integrated one at a time (never as a stacked batch), so the
    result is bit-identical for any ``workers`` count.
    """
    x1s = np.asarray(x1s, dtype=float)

    def one(i):
        return rollout(model, solver, schedule, x1s[i], c)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one, range(len(x1s))))
    return [one(i) for i in range(len(x1s))]


def sample_rollout(model, schedule: TimeSchedule, x_1, c=None, solver: str = "dpmpp") -> np.ndarray:
    """Inference: deterministic ODE sampling only."""
    return rollout(model, solver, schedule, x_1, c).x0


# ---------------------------------------------------------------------------
# ratios, objective, gradient


def _transition(rollout_: GroupRollout, step_index: int):
    T = rollout_.schedule.T
    if not 0 <= step_index < T - 1:
        raise IndexError(f"step index {step_index} outside 0..{T - 2}")
    t, dt = rollout_.schedule.step(step_index)
    return t, dt, rollout_.states[step_index], rollout_.states[step_index + 1]


def anchor_ratios(rollout_: GroupRollout, k: int, step_index: int, model_new, model_old=None,
                  temperature: float | None = None, old_anchor: str = "stored") -> np.ndarray:
    """``pi_new(x_i) / pi_old(x_i)`` for anchor member ``k`` at one transition.

    The new anchor is a fresh Euler step from member k's previous state under
    ``model_new``. The old anchor is member k's stored state, or the Euler
    step under ``model_old`` when ``old_anchor == "recompute"``.
    """
    if not 0 <= k < rollout_.G:
        raise IndexError(f"anchor index {k} outside 0..{rollout_.G - 1}")
    t, dt, prev, cand = _transition(rollout_, step_index)
    new_anchor = prev[k] - dt * model_new.forward(prev[k], t, rollout_.c)
    if old_anchor == "recompute":
        old = prev[k] - dt * model_old.forward(prev[k], t, rollout_.c)
    else:
        old = cand[k]
    lp_new = leap_policy(cand, new_anchor, temperature).log_probs
    lp_old = leap_policy(cand, old, temperature).log_probs
    return np.exp(lp_new - lp_old)


@dataclass
class AnchorEval:
    value: float
    grad: np.ndarray
    ratios: np.ndarray  # (n_steps, G)
    active: np.ndarray  # (n_steps, G)
    terms: np.ndarray  # (n_steps, G)


def anchor_objective(model, rollout_: GroupRollout, k: int, step_indices, advantages,
                     clip_eps: float, temperature: float | None = None, exclude_self: bool = False,
                     old_anchor: str = "stored", model_old=None, need_grad: bool = True) -> AnchorEval:
    """Clipped objective of one anchor summed over ``step_indices`` and its
    gradient with respect to the model parameters (ascent direction).

    All anchor points for the steps are evaluated in one batched forward and
    backward pass. With ``p`` the new policy, the log-policy derivative with
    respect to the anchor is ``2 (x_i - sum_m p_m x_m) / temperature``.
    """
    A = np.asarray(getattr(advantages, "values", advantages), dtype=float)
    steps = list(step_indices)
    tau = 1.0 if temperature is None else temperature
    sched = rollout_.schedule
    prev = np.stack([_transition(rollout_, s)[2][k] for s in steps])
    ts = np.array([sched.step(s)[0] for s in steps])
    dts = np.array([sched.step(s)[1] for s in steps])
    v = model.forward(prev, ts, rollout_.c)
    anchors = prev - dts[:, None] * v
    if old_anchor == "recompute":
        olds = prev - dts[:, None] * model_old.forward(prev, ts, rollout_.c)
    else:
        olds = np.stack([rollout_.states[s + 1][k] for s in steps])
    if not (np.all(np.isfinite(anchors)) and np.all(np.isfinite(olds))):
        raise NumericalAbort(f"non-finite anchor point for member {k}")
    G = rollout_.G
    mask = np.ones(G, dtype=bool)
    if exclude_self:
        mask[k] = False
    ratios = np.empty((len(steps), G))
    active = np.empty((len(steps), G), dtype=bool)
    terms = np.empty((len(steps), G))
    d_anchor = np.zeros_like(anchors)
    for j, s in enumerate(steps):
        cand = rollout_.states[s + 1]
        try:
            pol = leap_policy(cand, anchors[j], tau)
            lp_old = leap_policy(cand, olds[j], tau).log_probs
        except ValueError as e:
            raise NumericalAbort(f"leap policy failed at step {s}: {e}") from e
        rho = np.exp(pol.log_probs - lp_old)
        if not np.all(np.isfinite(rho)) or np.any(rho <= 0):
            raise NumericalAbort(f"policy ratio out of range at step {s}")
        term, act = clipped_terms(A, rho, clip_eps)
        term = np.where(mask, term, 0.0)
        act &= mask
        ratios[j], active[j], terms[j] = rho, act, term
        if need_grad:
            w = np.where(act, A * rho, 0.0)
            mean_x = pol.probs @ cand
            d_anchor[j] = (2.0 / tau) * (w @ (cand - mean_x))
    grad = None
    if need_grad:
        grad, _ = model.backward(prev, ts, rollout_.c, -dts[:, None] * d_anchor)
    return AnchorEval(float(terms.sum()), grad, ratios, active, terms)


def group_objective(model, rollout_: GroupRollout, step_index: int, advantages, clip_eps: float,
                    temperature: float | None = None) -> float:
    """Mean over all G anchors of the single-step objective, vectorized over
    anchors (a separate code path from :func:`anchor_objective`)."""
    A = np.asarray(getattr(advantages, "values", advantages), dtype=float)
    t, dt, prev, cand = _transition(rollout_, step_index)
    tau = 1.0 if temperature is None else temperature
    anchors = prev - dt * model.forward(prev, np.full(len(prev), t), rollout_.c)

    def logpol(points):
        d2 = np.sum((points[:, None, :] - cand[None, :, :]) ** 2, axis=2) / tau
        z = -(d2 - d2.min(axis=1, keepdims=True))
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    rho = np.exp(logpol(anchors) - logpol(cand))
    clipped = np.clip(rho, 1 - clip_eps, 1 + clip_eps)
    per_anchor = np.minimum(A * rho, A * clipped).sum(axis=1)
    return float(per_anchor.mean())


# ---------------------------------------------------------------------------
# training loop


def no_prompt(rng: RngStream):
    return None


def neighbor_grpo_iteration(model, cfg: TrainLoopConfig, prompt_sampler, reward_fn, rng: RngStream,
                            optimizer: Adam | None = None, workers: int | None = None):
    """One iteration: rollout, advantages, per-anchor clipped-ratio updates.

    Returns ``(new_model, metrics)``; ``model`` itself is left untouched and
    plays the role of the frozen old policy.
    """
    t0 = time.perf_counter()
    cfg.validate()
    model_old = model
    model_new = model.copy()
    if optimizer is None:
        optimizer = Adam(model.n_params, cfg.lr)
    schedule = uniform_schedule(cfg.T)
    c = prompt_sampler(rng)
    eps_star = rng.gaussian(model.data_dim)
    group = perturb_noise(eps_star, cfg.sigma, cfg.G, rng)
    trajs = rollout_group(model_old, group.members, schedule, cfg.rollout_solver, c, workers)
    x0 = np.stack([tr.x0 for tr in trajs])
    if not all(np.all(np.isfinite(tr.states)) for tr in trajs):
        raise NumericalAbort("non-finite rollout state")
    rewards = np.asarray(reward_fn(x0, c), dtype=float)
    if rewards.shape != (cfg.G,) or not np.all(np.isfinite(rewards)):
        raise NumericalAbort("reward function returned non-finite or misshaped rewards")
    ro = GroupRollout(trajs, c, schedule, rewards, group)
    adv = compute_advantages(rewards, cfg.advantage_mode, cfg.p, cfg.std_ddof)

    anchors = rng.choice(cfg.G, cfg.B)
    steps = rng.choice(cfg.T - 1, cfg.K)
    objective = 0.0
    n_terms = n_clipped = 0
    ratio_all = []
    acc = np.zeros(model.n_params)
    for k in anchors:
        if cfg.resample_steps_per_anchor:
            steps = rng.choice(cfg.T - 1, cfg.K)
        ev = anchor_objective(model_new, ro, int(k), steps, adv, cfg.clip_eps, cfg.temperature,
                              cfg.exclude_self, cfg.resolved_old_anchor, model_old)
        if not np.all(np.isfinite(ev.grad)) or not math.isfinite(ev.value):
            raise NumericalAbort(f"non-finite gradient at anchor {k}")
        objective += ev.value
        valid = np.ones(cfg.G, dtype=bool)
        if cfg.exclude_self:
            valid[k] = False
        n_terms += int(valid.sum()) * len(steps)
        n_clipped += int((~ev.active[:, valid]).sum())
        ratio_all.append(ev.ratios.ravel())
        if cfg.per_anchor_update:
            optimizer.step(model_new.params, -ev.grad)
        else:
            acc += ev.grad
    if not cfg.per_anchor_update:
        optimizer.step(model_new.params, -acc)
    if not np.all(np.isfinite(model_new.params)):
        raise NumericalAbort("non-finite parameters after update")
    ratios = np.concatenate(ratio_all)
    metrics = {
        "mean_reward": float(rewards.mean()),
        "std_reward": float(rewards.std()),
        "objective": objective / (cfg.B * cfg.K),
        "frac_clipped": n_clipped / max(n_terms, 1),
        "ratio_min": float(ratios.min()),
        "ratio_max": float(ratios.max()),
        "ratio_mean": float(ratios.mean()),
        "nfe_old": cfg.T,
        "nfe_theta": cfg.nfe_theta,
        "nfe_old_total": ro.nfe,
        "nfe_theta_total": cfg.B * cfg.K,
        "wall_ms": 1000.0 * (time.perf_counter() - t0),
        "advantages": np.array(adv.values, dtype=float),
    }
    return model_new, metrics


class NeighborGRPOTrainer:
    """Keeps the model and optimizer state across iterations."""

    variant = "neighbor"

    def __init__(self, model, cfg: TrainLoopConfig, prompt_sampler, reward_fn, rng: RngStream,
                 workers: int | None = None):
        self.cfg = cfg.validate()
        self.model = model.copy()
        self.optimizer = Adam(model.n_params, cfg.lr)
        self.prompt_sampler = prompt_sampler
        self.reward_fn = reward_fn
        self.rng = rng
        self.workers = workers

    def step(self) -> dict:
        self.model, metrics = neighbor_grpo_iteration(self.model, self.cfg, self.prompt_sampler,
                                                      self.reward_fn, self.rng, self.optimizer,
                                                      self.workers)
        return metrics


# ---------------------------------------------------------------------------
# anchor-subset estimator diagnostics


def anchor_estimator_check(rollout_: GroupRollout, model_new, model_old, cfg: TrainLoopConfig,
                           step_index: int = 0, draws: int = 1000, rng: RngStream | None = None) -> dict:
    """Compare single-anchor objectives against the all-anchor objective.

    Reports the gap between the mean of the G single-anchor values and the
    vectorized all-anchor value, and a Monte-Carlo check that uniformly drawn
    single anchors estimate it without bias.
    """
    adv = compute_advantages(rollout_.rewards, cfg.advantage_mode, cfg.p, cfg.std_ddof)
    singles = np.array([
        anchor_objective(model_new, rollout_, k, [step_index], adv, cfg.clip_eps, cfg.temperature,
                         need_grad=False).value
        for k in range(rollout_.G)
    ])
    full = group_objective(model_new, rollout_, step_index, adv, cfg.clip_eps, cfg.temperature)
    rng = rng or RngStream(0)
    picks = rng.integers(0, rollout_.G, size=draws)
    est = singles[picks]
    se = float(est.std(ddof=1) / math.sqrt(draws)) if draws > 1 else math.inf
    mc_mean = float(est.mean())
    return {
        "full_objective": full,
        "mean_single": float(singles.mean()),
        "identity_gap": abs(float(singles.mean()) - full),
        "mc_mean": mc_mean,
        "mc_se": se,
        "mc_within_3se": abs(mc_mean - full) <= 3 * se,
        "singles": singles,
    }
