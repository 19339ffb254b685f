"""Oracle and invariant checks behind ``verify`` and the acceptance suite.

Every check returns a :class:`CheckResult` holding the measured quantities,
so callers can apply (and print) their own pass criteria.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .experiment import (REFERENCE_NFE_CONFIGS, final_mean, iterations_to_reach, load_or_pretrain, pretrain,
                         read_metrics, run_experiment, run_sweep)
from .grpo import advantages_quasinorm, advantages_standard, compute_advantages
from .mathcore import RngStream
from .neighbor import GroupRollout, TrainLoopConfig, anchor_estimator_check, anchor_objective, perturb_noise, \
    rollout_group
from .sde_baseline import SdeTransition, contrastive_equivalence_check, gaussian_log_prob, log_prob_grad
from .solvers import rollout, sde_sigma_schedule, uniform_schedule
from .velocity import GaussianFlowOracle, VelocityModel


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        shown = ", ".join(f"{k}={_short(v)}" for k, v in self.details.items())
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name} ({self.seconds:.1f}s): {shown}"


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return f"[{len(v)} values]" if len(v) > 6 else "[" + ", ".join(str(_short(x)) for x in v) + "]"
    return v


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def central_fd(f, params: np.ndarray, coords, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f(params)`` along selected coordinates."""
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        old = params[i]
        params[i] = old + h
        fp = f()
        params[i] = old - h
        fm = f()
        params[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def _grad_rel_err(analytic, fd) -> float:
    scale = max(float(np.max(np.abs(fd))), float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(analytic - fd)) / scale)


def _perturbed(model: VelocityModel, rng: RngStream, scale: float) -> VelocityModel:
    m = model.copy()
    m.params += scale * rng.gaussian(m.n_params)
    return m


# ---------------------------------------------------------------------------
# 1. gradients


def _nll_instance(rng: RngStream, n_coords: int):
    model = VelocityModel.initialized(2, rng.fork(0))
    n = 6
    x = 1.5 * rng.gaussian(2 * n).reshape(n, 2)
    t = 0.1 + 0.85 * float(rng.uniform(1)[0])
    dt = t * (0.05 + 0.3 * float(rng.uniform(1)[0]))
    sig = 0.05 + 0.45 * float(rng.uniform(1)[0])
    mu = gaussian_log_prob(model, x, t, dt, sig, np.zeros_like(x)).mean
    sample = mu + sig * rng.gaussian(2 * n).reshape(n, 2)

    def nll():
        return -float(np.sum(gaussian_log_prob(model, x, t, dt, sig, sample).log_prob))

    analytic = -log_prob_grad(model, x, t, dt, sig, sample)
    coords = rng.choice(model.n_params, n_coords)
    return _grad_rel_err(analytic[coords], central_fd(nll, model.params, coords))


def _objective_instance(rng: RngStream, n_coords: int):
    old = VelocityModel.initialized(2, rng.fork(0))
    new = _perturbed(old, rng.fork(1), 0.01)
    G, T = 6, 8
    sched = uniform_schedule(T)
    group = perturb_noise(rng.gaussian(2), 0.3, G, rng)
    ro = GroupRollout(rollout_group(old, group.members, sched, "euler"), None, sched)
    adv = compute_advantages(rng.gaussian(G), "quasi_norm", 0.8)
    clip = 0.05 + 0.25 * float(rng.uniform(1)[0])
    k = int(rng.integers(0, G))
    s = int(rng.integers(0, T - 1))
    ev = anchor_objective(new, ro, k, [s], adv, clip, model_old=old)
    # keep away from the clip kinks so central differences are valid
    if np.min(np.abs(np.abs(ev.ratios - 1) - clip)) < 1e-4:
        return None

    def value():
        return anchor_objective(new, ro, k, [s], adv, clip, model_old=old, need_grad=False).value

    coords = rng.choice(new.n_params, n_coords)
    return _grad_rel_err(ev.grad[coords], central_fd(value, new.params, coords))


@_timed
def gradient_fidelity(n_instances: int = 50, n_coords: int = 40, seed: int = 0) -> CheckResult:
    """Analytic parameter gradients vs central differences on random instances."""
    base = RngStream(seed)
    nll = [_nll_instance(base.fork(i), n_coords) for i in range(n_instances)]
    obj = []
    i = 0
    while len(obj) < n_instances:
        e = _objective_instance(base.fork(10_000 + i), n_coords)
        i += 1
        if e is not None:
            obj.append(e)
    d = {"nll_max_rel_err": max(nll), "objective_max_rel_err": max(obj), "instances": n_instances,
         "objective_skipped_near_kink": i - n_instances}
    return CheckResult("gradient fidelity", d["nll_max_rel_err"] < 1e-5 and d["objective_max_rel_err"] < 1e-4, d)


# ---------------------------------------------------------------------------
# 2. solver orders


def order_slope(solver: str, Ts=(16, 32, 64, 128), oracle: GaussianFlowOracle | None = None,
                n: int = 256, seed: int = 0):
    """Least-squares slope of log(max terminal error) against log(dt)."""
    o = oracle or GaussianFlowOracle((1.0, -0.5), 0.5)
    x1 = RngStream(seed).gaussian(n * o.data_dim).reshape(n, o.data_dim)
    exact = o.exact_flow(x1, 0.0)
    errs = []
    for T in Ts:
        x0 = rollout(o, solver, uniform_schedule(T), x1).x0
        errs.append(float(np.max(np.abs(x0 - exact))))
    slope = float(np.polyfit(np.log(1.0 / np.asarray(Ts)), np.log(errs), 1)[0])
    return slope, errs


@_timed
def solver_orders() -> CheckResult:
    se, ee = order_slope("euler")
    sd, ed = order_slope("dpmpp")
    d = {"euler_slope": se, "dpmpp_slope": sd, "euler_errors": ee, "dpmpp_errors": ed}
    return CheckResult("solver orders", abs(se - 1.0) <= 0.25 and abs(sd - 2.0) <= 0.3, d)


# ---------------------------------------------------------------------------
# 3. SDE marginal


def sde_terminal_ensemble(oracle: GaussianFlowOracle, n: int, T: int, a: float = 0.7, seed: int = 0):
    """Terminal states of ``n`` SDE rollouts under the baseline noise schedule."""
    sched = uniform_schedule(T)
    rng = RngStream(seed)
    x1 = rng.gaussian(n * oracle.data_dim).reshape(n, oracle.data_dim)
    sig = sde_sigma_schedule(sched, a)
    return rollout(oracle, "sde", sched, x1, rng=rng.fork(1), sigmas=sig).x0


def marginal_z_scores(x0, mean: float, var: float) -> tuple[float, float]:
    """z-scores of the sample mean and (unbiased) sample variance."""
    n = len(x0)
    z_mean = (float(x0.mean()) - mean) / math.sqrt(var / n)
    z_var = (float(x0.var(ddof=1)) - var) / (var * math.sqrt(2.0 / (n - 1)))
    return z_mean, z_var


@_timed
def sde_marginal(n: int = 50_000, T: int = 1024, seed: int = 1) -> CheckResult:
    """Terminal mean and variance of the SDE ensemble vs the data marginal.

    Data ``N(0.5, 0.8^2)`` in one dimension.
    """
    o = GaussianFlowOracle((0.5,), 0.8)
    x0 = sde_terminal_ensemble(o, n, T, seed=seed)[:, 0]
    zm, zv = marginal_z_scores(x0, 0.5, 0.64)
    d = {"mean": float(x0.mean()), "var": float(x0.var(ddof=1)), "mean_z": zm, "var_z": zv, "n": n, "T": T,
         "seed": seed}
    return CheckResult("SDE marginal", abs(zm) <= 3 and abs(zv) <= 3, d)


# ---------------------------------------------------------------------------
# 4. contrastive identity


@_timed
def contrastive_identity(n_instances: int = 20, seed: int = 0) -> CheckResult:
    base = RngStream(seed)
    nll_err = grad_err = 0.0
    at_old_scaled = 0.0
    residual_at_old = 0.0
    for i in range(n_instances):
        rng = base.fork(i)
        old = VelocityModel.initialized(2, rng.fork(0))
        new = _perturbed(old, rng.fork(1), 0.02)
        batch = []
        for _ in range(4):
            t = 0.1 + 0.85 * float(rng.uniform(1)[0])
            batch.append(SdeTransition(rng.gaussian(2), t, t / 8, 0.05 + 0.4 * float(rng.uniform(1)[0]),
                                       rng.gaussian(2), float(rng.gaussian(1)[0])))
        r = contrastive_equivalence_check(new, old, batch)
        nll_err = max(nll_err, r["nll_identity_err"])
        grad_err = max(grad_err, r["grad_identity_rel_err"])
        r0 = contrastive_equivalence_check(old, old, batch)
        at_old_scaled = max(at_old_scaled, r0["grad_scaled_mse_rel_err"])
        residual_at_old = max(residual_at_old, r0["residual_norm"])
    d = {"nll_identity_err": nll_err, "grad_identity_rel_err": grad_err,
         "scaled_mse_rel_err_at_old": at_old_scaled, "residual_at_old": residual_at_old}
    ok = nll_err < 1e-9 and grad_err < 1e-9 and at_old_scaled < 1e-9 and residual_at_old == 0.0
    return CheckResult("contrastive identity", ok, d)


# ---------------------------------------------------------------------------
# 5. anchor estimator


@_timed
def anchor_estimator(n_groups: int = 5, draws: int = 1000, seed: int = 0) -> CheckResult:
    base = RngStream(seed)
    gap = 0.0
    within = []
    for i in range(n_groups):
        rng = base.fork(i)
        old = VelocityModel.initialized(2, rng.fork(0))
        new = _perturbed(old, rng.fork(1), 0.01)
        cfg = TrainLoopConfig(clip_eps=0.05)
        sched = uniform_schedule(cfg.T)
        group = perturb_noise(rng.gaussian(2), cfg.sigma, cfg.G, rng)
        ro = GroupRollout(rollout_group(old, group.members, sched, "euler"), None, sched,
                          rewards=rng.gaussian(cfg.G))
        r = anchor_estimator_check(ro, new, old, cfg, step_index=int(rng.integers(0, cfg.T - 1)),
                                   draws=draws, rng=rng.fork(2))
        gap = max(gap, r["identity_gap"])
        within.append(bool(r["mc_within_3se"]))
    d = {"identity_gap": gap, "mc_within_3se": f"{sum(within)}/{len(within)}"}
    return CheckResult("anchor estimator", gap < 1e-12 and all(within), d)


# ---------------------------------------------------------------------------
# 6. quasi-norm


@_timed
def quasi_norm_algebra(seed: int = 0) -> CheckResult:
    flat_err = 0.0
    for G in (4, 8, 12):
        r = np.array([1.0, -1.0] * (G // 2))
        for p in (0.5, 0.8, 1.0, 2.0):
            a = advantages_quasinorm(r, p).values
            flat_err = max(flat_err, float(np.max(np.abs(np.abs(a) - G ** (-1.0 / p)))))
    rng = RngStream(seed)
    p2_err = 0.0
    for G in (4, 8, 12):
        for _ in range(20):
            r = rng.gaussian(G)
            p2_err = max(p2_err, float(np.max(np.abs(
                advantages_quasinorm(r, 2.0).values - advantages_standard(r).values / math.sqrt(G)))))
    d = {"flat_magnitude_err": flat_err, "p2_vs_standard_err": p2_err}
    return CheckResult("quasi-norm algebra", flat_err <= 1e-15 and p2_err < 1e-9, d)


# ---------------------------------------------------------------------------
# 7. NFE accounting


@_timed
def nfe_accounting() -> CheckResult:
    want = {"Neighbor GRPO 8-step": "1.33", "Neighbor GRPO 16-step": "3.00",
            "Neighbor GRPO 25-step": "4.00", "DanceGRPO": "14.00"}
    got = {r.method: f"{r.nfe_theta:.2f}" for r in REFERENCE_NFE_CONFIGS if r.method in want}
    return CheckResult("NFE accounting", got == want, got)


# ---------------------------------------------------------------------------
# 8. neighborhood statistics


@_timed
def neighborhood_stats(d: int = 4096, G: int = 12, sigma: float = 0.3, n_groups: int = 200,
                       seed: int = 0) -> CheckResult:
    rng = RngStream(seed)
    total = sq = 0.0
    count = 0
    spreads = []
    iu = np.triu_indices(G, 1)
    for _ in range(n_groups):
        g = perturb_noise(rng.gaussian(d), sigma, G, rng).members
        total += g.sum()
        sq += (g**2).sum()
        count += g.size
        gram = g @ g.T
        nrm = np.diag(gram)
        dist = np.sqrt(np.maximum(nrm[:, None] + nrm[None, :] - 2 * gram, 0.0))[iu]
        spreads.append((dist.max() - dist.min()) / dist.mean())
    mean = total / count
    var = sq / count - mean**2
    frac = float(np.mean(np.asarray(spreads) < 0.15))
    det = {"pooled_var": var, "pooled_mean": mean, "frac_groups_spread_lt_0.15": frac,
           "median_spread": float(np.median(spreads))}
    return CheckResult("neighborhood statistics", abs(var - 1) < 0.02 and frac >= 0.95, det)


# ---------------------------------------------------------------------------
# 9-10. end to end


def default_experiment(out_dir: str, variant: str = "neighbor", **overrides) -> ExperimentConfig:
    return ExperimentConfig(out_dir=out_dir, variant=variant).replace(**overrides)


def train_pair(out_dir: str, **overrides):
    """Neighbor GRPO and the SDE baseline from one shared pretrained model."""
    base = default_experiment(os.path.join(out_dir, "neighbor"), **overrides)
    model, ckpt = load_or_pretrain(base, out_dir)
    neigh = run_experiment(base.replace(checkpoint=ckpt), model=model)
    sde = run_experiment(base.replace(checkpoint=ckpt, variant="sde", out_dir=os.path.join(out_dir, "sde")),
                         model=model)
    return neigh, sde


@_timed
def end_to_end(neigh) -> CheckResult:
    """Reward gain of a Neighbor GRPO run in units of the pretrain reward std."""
    gains = [r.gain_in_std for r in neigh.seeds]
    curves = neigh.curves()
    block_means = {s: [round(float(np.mean(c[i:i + 50])), 3) for i in range(0, len(c), 50)]
                   for s, c in curves.items()}
    monotone = {s: bool(np.all(np.diff(b) >= 0)) for s, b in block_means.items()}
    d = {"gains_in_std": [round(g, 3) for g in gains], "seeds_passing": sum(g >= 0.5 for g in gains),
         "block50_means": block_means, "block50_monotone": monotone}
    return CheckResult("end-to-end improvement", d["seeds_passing"] >= 2, d)


@_timed
def comparative_convergence(neigh, sde) -> CheckResult:
    """Iterations Neighbor GRPO needs to reach the SDE baseline's final reward."""
    reach, sde_final, neigh_final = {}, {}, {}
    for rn, rs in zip(neigh.seeds, sde.seeds):
        cn = read_metrics(rn.metrics_path)["mean_reward"]
        cs = read_metrics(rs.metrics_path)["mean_reward"]
        sde_final[rn.seed] = round(final_mean(cs), 4)
        neigh_final[rn.seed] = round(final_mean(cn), 4)
        reach[rn.seed] = iterations_to_reach(cn, final_mean(cs))
    budget = neigh.config.train.iterations
    ok_seeds = sum(v is not None and v <= budget for v in reach.values())
    d = {"sde_final": sde_final, "neighbor_final": neigh_final, "iterations_to_reach": reach,
         "seeds_passing": ok_seeds, "nfe_old": neigh.config.train.T}
    return CheckResult("comparative convergence", ok_seeds >= 2, d)


# ---------------------------------------------------------------------------
# 11. determinism


def _tiny(out_dir: str, **kw) -> ExperimentConfig:
    base = dict(pretrain_steps=200, n_data=2000, eval_samples=64, seeds=[0, 1], iterations=6,
                record_wall_time=False)
    base.update(kw)
    return default_experiment(out_dir, **base)


def _read_all(root: str) -> dict:
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            if f.endswith((".csv", ".json", ".svg")):
                p = os.path.join(dirpath, f)
                with open(p, "rb") as fh:
                    out[os.path.relpath(p, root)] = fh.read()
    return out


@_timed
def determinism() -> CheckResult:
    """Run every pipeline twice into separate directories and compare bytes."""
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        a, b = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        ma = pretrain(_tiny(a)).to_dict()
        mb = pretrain(_tiny(b)).to_dict()
        if ma != mb:
            mismatched.append("pretrain")
        for root in (a, b):
            for variant in ("neighbor", "sde"):
                run_experiment(_tiny(os.path.join(root, variant), variant=variant))
            run_experiment(_tiny(os.path.join(root, "sde_windowed"), variant="sde_windowed", sde_window=3,
                                 sde_window_stride=2))
            run_sweep(_tiny(os.path.join(root, "sweep"), seeds=[0], iterations=3), "B")
        fa, fb = _read_all(a), _read_all(b)
        if set(fa) != set(fb):
            mismatched.append("file sets differ")
        for k in sorted(set(fa) & set(fb)):
            if k.endswith("config.json"):
                # differs in out_dir by construction; compare what the hash covers
                same = (ExperimentConfig.from_json(fa[k].decode()).config_hash()
                        == ExperimentConfig.from_json(fb[k].decode()).config_hash())
            else:
                same = fa[k] == fb[k]
            if not same:
                mismatched.append(k)
        n_files = len(fa)
    d = {"files_compared": n_files, "mismatched": mismatched or "none"}
    return CheckResult("determinism", not mismatched, d)


FAST_CHECKS = (gradient_fidelity, solver_orders, sde_marginal, contrastive_identity, anchor_estimator,
               quasi_norm_algebra, nfe_accounting, neighborhood_stats, determinism)


def run_all(out_dir: str | None = None, include_training: bool = True) -> list:
    results = [check() for check in FAST_CHECKS]
    if include_training:
        t0 = time.perf_counter()
        neigh, sde = train_pair(out_dir or tempfile.mkdtemp(prefix="verify_"))
        results.append(end_to_end(neigh))
        results.append(comparative_convergence(neigh, sde))
        results[-2].seconds += time.perf_counter() - t0
    return results
