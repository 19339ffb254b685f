"""SDE-based GRPO baseline and diagnostics of its contrastive reading.

Each stochastic step defines the Gaussian policy ``N(mu, sigma_t^2 I)`` with
``mu = x_ode - sigma_t^2 / (2t) * eps_hat``. Writing the old sample as the
old ODE point plus injected noise, the new-policy NLL becomes a squared
distance to that perturbed target, shifted by the drift residual
``o_t = sigma_t^2 / (2t) * (eps_hat_new - eps_hat_old)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .grpo import clipped_terms, compute_advantages
from .mathcore import Adam, RngStream
from .neighbor import NumericalAbort, TrainLoopConfig
from .solvers import estimated_noise, rollout, sde_sigma_schedule, uniform_schedule


@dataclass
class GaussianPolicyEval:
    mean: np.ndarray
    sigma_t: float
    log_prob: np.ndarray | float


def _policy_mean(model, x, t, dt, sigma_t, c):
    v = model.forward(x, t, c)
    return x - dt * v - (sigma_t**2 / (2 * t)) * estimated_noise(x, t, v)


def gaussian_log_prob(model, x_t_plus, t_plus: float, dt: float, sigma_t: float, sample, c=None) -> GaussianPolicyEval:
    """Exact log-density of ``sample`` under the step policy from ``x_t_plus``.

    Batched inputs give one log-probability per row.
    """
    if not sigma_t > 0:
        raise ValueError("sigma_t must be positive")
    if not t_plus > 0:
        raise ValueError("t_plus must be positive")
    mu = _policy_mean(model, np.asarray(x_t_plus, dtype=float), t_plus, dt, sigma_t, c)
    diff = np.asarray(sample, dtype=float) - mu
    d = diff.shape[-1]
    lp = -0.5 * np.sum(diff**2, axis=-1) / sigma_t**2 - 0.5 * d * math.log(2 * math.pi * sigma_t**2)
    return GaussianPolicyEval(mu, sigma_t, lp if np.ndim(lp) else float(lp))


def log_prob_grad(model, x_t_plus, t_plus, dt, sigma_t, sample, c=None, weights=None) -> np.ndarray:
    """``sum_i w_i grad_theta log pi(sample_i | x_t_plus_i)`` (flat)."""
    x = np.atleast_2d(np.asarray(x_t_plus, dtype=float))
    s = np.atleast_2d(np.asarray(sample, dtype=float))
    mu = _policy_mean(model, x, t_plus, dt, sigma_t, c)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    # d mu / d v = -(dt + sigma^2 (1 - t) / (2t))
    dmu_dv = -(dt + sigma_t**2 * (1 - t_plus) / (2 * t_plus))
    upstream = w[:, None] * (s - mu) / sigma_t**2 * dmu_dv
    grad, _ = model.backward(x, t_plus, c, upstream)
    return grad


@dataclass
class DriftResidual:
    o_t: np.ndarray


def drift_residual(model_new, model_old, x_t, t: float, dt: float, sigma_t: float, c=None) -> DriftResidual:
    if not t > 0:
        raise ValueError("t must be positive")
    x_t = np.asarray(x_t, dtype=float)
    eps_new = estimated_noise(x_t, t, model_new.forward(x_t, t, c))
    eps_old = estimated_noise(x_t, t, model_old.forward(x_t, t, c))
    return DriftResidual((sigma_t**2 / (2 * t)) * (eps_new - eps_old))


@dataclass
class SdeTransition:
    """One stored stochastic step: start point, time, step, noise scale, noise."""

    x_prev: np.ndarray
    t: float
    dt: float
    sigma_t: float
    noise: np.ndarray
    advantage: float = 1.0
    c: np.ndarray | None = None


def _rel_err(a, b) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def contrastive_equivalence_check(model_new, model_old, batch) -> dict:
    """Check the NLL-as-MSE identity on stored SDE transitions.

    * ``nll_identity_err``: max |exact NLL - MSE form| where the MSE form is
      ``||x_tilde - x_ode_new + o_t||^2 / (2 sigma^2) + const`` and
      ``x_tilde = x_ode_old + sigma * noise``.
    * ``grad_identity_rel_err``: advantage-weighted NLL gradient versus the
      gradient of the MSE form, each computed through its own path.
    * ``grad_scaled_mse_rel_err``: NLL gradient versus ``kappa_t`` times the
      gradient of the plain MSE to the perturbed target (residual dropped),
      ``kappa_t = 1 + sigma^2 (1 - t) / (2 t dt)``. Both depend on the model
      only through ``v``, so at the old parameters they agree exactly.
    * ``residual_norm``: max ||o_t|| over the batch.
    """
    if not batch:
        raise ValueError("empty batch")
    nll_err = 0.0
    g_nll = np.zeros(model_new.n_params)
    g_mse_full = np.zeros(model_new.n_params)
    g_mse_scaled = np.zeros(model_new.n_params)
    res_norm = 0.0
    for tr in batch:
        if tr.noise is None:
            raise ValueError("transition is missing its recorded noise")
        x, t, dt, sig = np.asarray(tr.x_prev, dtype=float), tr.t, tr.dt, tr.sigma_t
        v_old = model_old.forward(x, t, tr.c)
        v_new = model_new.forward(x, t, tr.c)
        x_ode_old = x - dt * v_old
        sample = x_ode_old - (sig**2 / (2 * t)) * estimated_noise(x, t, v_old) + sig * tr.noise
        x_tilde = x_ode_old + sig * tr.noise
        x_ode_new = x - dt * v_new
        o = drift_residual(model_new, model_old, x, t, dt, sig, tr.c).o_t
        res_norm = max(res_norm, float(np.linalg.norm(o)))
        const = 0.5 * x.size * math.log(2 * math.pi * sig**2)
        nll = -gaussian_log_prob(model_new, x, t, dt, sig, sample, tr.c).log_prob
        resid = x_tilde - x_ode_new + o
        mse_form = float(resid @ resid) / (2 * sig**2) + const
        nll_err = max(nll_err, abs(nll - mse_form))

        A = tr.advantage
        # ascent direction of A * log pi, i.e. -A * grad NLL
        g_nll += log_prob_grad(model_new, x, t, dt, sig, sample, tr.c, A)
        # MSE form: resid depends on v through x_ode_new (-dt) and o (+sigma^2 (1-t) / 2t)
        dresid_dv = dt + sig**2 * (1 - t) / (2 * t)
        up = -A * (resid / sig**2) * dresid_dv
        g_mse_full += model_new.backward(x, t, tr.c, up)[0]
        plain = x_tilde - x_ode_new
        kappa = 1 + sig**2 * (1 - t) / (2 * t * dt)
        up_plain = -A * (plain / sig**2) * dt
        g_mse_scaled += kappa * model_new.backward(x, t, tr.c, up_plain)[0]
    return {
        "nll_identity_err": nll_err,
        "grad_identity_rel_err": _rel_err(g_nll, g_mse_full),
        "grad_scaled_mse_rel_err": _rel_err(g_nll, g_mse_scaled),
        "grad_scaled_mse_abs_err": float(np.linalg.norm(g_nll - g_mse_scaled)),
        "residual_norm": res_norm,
    }


# ---------------------------------------------------------------------------
# trainer


def _window_steps(cfg: TrainLoopConfig, iteration: int):
    """Trainable transitions for this iteration (all of them unless windowed)."""
    n = cfg.T - 1
    if cfg.sde_window is None:
        return list(range(n))
    n_pos = n - cfg.sde_window + 1
    start = (iteration // cfg.sde_window_stride) % n_pos
    return list(range(start, start + cfg.sde_window))


def sde_grpo_iteration(model, cfg: TrainLoopConfig, prompt_sampler, reward_fn, rng: RngStream,
                       optimizer: Adam | None = None, iteration: int = 0):
    """One SDE-GRPO iteration with a per-timestep optimizer update.

    All G members start from the same initial noise; each draws its step
    noise from its own forked stream. ``K`` of the trainable transitions are
    updated, each with one forward-backward pass over all G samples.
    """
    t0 = time.perf_counter()
    cfg.validate()
    model_old = model
    model_new = model.copy()
    if optimizer is None:
        optimizer = Adam(model.n_params, cfg.lr)
    schedule = uniform_schedule(cfg.T)
    sigmas = sde_sigma_schedule(schedule, cfg.sde_a, cfg.sde_eps_s, cfg.sde_max_sigma)
    window = _window_steps(cfg, iteration)
    if cfg.sde_window is not None:
        keep = np.zeros_like(sigmas)
        keep[window] = 1.0
        sigmas = sigmas * keep
    c = prompt_sampler(rng)
    eps_star = rng.gaussian(model.data_dim)
    member_seed = int(rng.integers(0, 2**63))
    base = RngStream(member_seed)
    trajs = [rollout(model_old, "sde", schedule, eps_star, c, base.fork(i), sigmas) for i in range(cfg.G)]
    states = np.stack([tr.states for tr in trajs], axis=1)  # (T+1, G, d)
    if not np.all(np.isfinite(states)):
        raise NumericalAbort("non-finite rollout state")
    x0 = states[-1]
    rewards = np.asarray(reward_fn(x0, c), dtype=float)
    if rewards.shape != (cfg.G,) or not np.all(np.isfinite(rewards)):
        raise NumericalAbort("reward function returned non-finite or misshaped rewards")
    adv = compute_advantages(rewards, cfg.sde_advantage_mode, cfg.p, cfg.std_ddof).values

    K = min(cfg.K, len(window))
    chosen = [window[i] for i in rng.choice(len(window), K)]
    # old log-probs through the same batched path used for the new ones
    old_lp = {}
    for s in chosen:
        t, dt = schedule.step(s)
        old_lp[s] = gaussian_log_prob(model_old, states[s], t, dt, sigmas[s], states[s + 1], c).log_prob
    objective = 0.0
    n_clipped = 0
    ratios_all = []
    for s in chosen:
        t, dt = schedule.step(s)
        new = gaussian_log_prob(model_new, states[s], t, dt, sigmas[s], states[s + 1], c)
        rho = np.exp(new.log_prob - old_lp[s])
        if not np.all(np.isfinite(rho)) or np.any(rho <= 0):
            raise NumericalAbort(f"policy ratio out of range at step {s}")
        terms, active = clipped_terms(adv, rho, cfg.clip_eps)
        w = np.where(active, adv * rho, 0.0)
        grad = log_prob_grad(model_new, states[s], t, dt, sigmas[s], states[s + 1], c, w)
        if not np.all(np.isfinite(grad)):
            raise NumericalAbort(f"non-finite gradient at step {s}")
        optimizer.step(model_new.params, -grad)
        objective += float(terms.sum())
        n_clipped += int((~active).sum())
        ratios_all.append(rho)
    if not np.all(np.isfinite(model_new.params)):
        raise NumericalAbort("non-finite parameters after update")
    ratios = np.concatenate(ratios_all)
    metrics = {
        "mean_reward": float(rewards.mean()),
        "std_reward": float(rewards.std()),
        "objective": objective / max(K, 1),
        "frac_clipped": n_clipped / max(K * cfg.G, 1),
        "ratio_min": float(ratios.min()),
        "ratio_max": float(ratios.max()),
        "ratio_mean": float(ratios.mean()),
        "nfe_old": cfg.T,
        "nfe_theta": float(K),
        "nfe_old_total": cfg.G * cfg.T,
        "nfe_theta_total": cfg.G * K,
        "wall_ms": 1000.0 * (time.perf_counter() - t0),
        "advantages": np.array(adv, dtype=float),
    }
    return model_new, metrics


class SdeGRPOTrainer:
    def __init__(self, model, cfg: TrainLoopConfig, prompt_sampler, reward_fn, rng: RngStream):
        self.cfg = cfg.validate()
        self.model = model.copy()
        self.optimizer = Adam(model.n_params, cfg.lr)
        self.prompt_sampler = prompt_sampler
        self.reward_fn = reward_fn
        self.rng = rng
        self.iteration = 0
        self.variant = "sde" if cfg.sde_window is None else "sde_windowed"

    def step(self) -> dict:
        self.model, metrics = sde_grpo_iteration(self.model, self.cfg, self.prompt_sampler, self.reward_fn,
                                                 self.rng, self.optimizer, self.iteration)
        self.iteration += 1
        return metrics
