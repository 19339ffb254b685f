"""Experiment pipeline: pretrain, fine-tune per seed, log, plot, sweep.

Output layout of one run directory::

    config.json                        canonical config
    manifest.json                      hash, version, per-seed summary, files
    metrics_<variant>_seed<k>.csv      one row per iteration (append-only)
    samples_<variant>_seed<k>.csv      terminal samples before/after training
    reward_curves.svg, scatter_<variant>_seed<k>.svg

Plots are regenerated from the CSV files alone (:func:`plot_dir`).
"""

from __future__ import annotations

import csv
import dataclasses
import glob
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import SWEEP_PRESETS, ConfigError, ExperimentConfig
from .mathcore import RngStream
from .neighbor import NeighborGRPOTrainer, NumericalAbort, no_prompt
from .rewards import RewardFn
from .sde_baseline import SdeGRPOTrainer
from .solvers import rollout, uniform_schedule
from .svgplot import line_chart, moving_average, scatter
from .velocity import VelocityModel, circle_mixture, fm_pretrain, mixture_centers, one_hot

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "mean_reward", "std_reward", "objective", "frac_clipped", "nfe_old",
                  "nfe_theta", "wall_ms", "seed", "variant", "config_hash", "advantages")
SAMPLE_COLUMNS = ("phase", "idx", "x0", "x1", "reward", "seed", "variant", "config_hash")
SUMMARY_COLUMNS = ("variant", "hyperparam", "final_mean_reward", "auc_reward", "wall_s_per_iter",
                   "seeds", "config_hash")
FINAL_WINDOW = 20
N_MODES = 8


# ---------------------------------------------------------------------------
# task pieces


def make_dataset(cfg: ExperimentConfig):
    return circle_mixture(cfg.n_data, RngStream(cfg.data_seed), modes=N_MODES)


def make_reward(cfg: ExperimentConfig) -> RewardFn:
    centers = mixture_centers(N_MODES)
    if cfg.reward_kind == "neg_mode_distance" and cfg.task == "circle8_cond":
        means = centers
    else:
        means = centers[list(cfg.reward_modes)]
    return RewardFn(kind=cfg.reward_kind, means=tuple(map(tuple, means)), std=cfg.reward_std,
                    weights=cfg.reward_weights, mode_index=0, plateau_radius=cfg.plateau_radius,
                    plateau_value=cfg.plateau_value)


def conditional_prompt(rng: RngStream) -> np.ndarray:
    """Uniformly drawn one-hot mode label."""
    return one_hot(int(rng.integers(0, N_MODES)), N_MODES)


def make_prompt_sampler(cfg: ExperimentConfig):
    return conditional_prompt if cfg.task == "circle8_cond" else no_prompt


def _cond_dim(cfg: ExperimentConfig) -> int:
    return N_MODES if cfg.task == "circle8_cond" else 0


def pretrain(cfg: ExperimentConfig, loss_log: list | None = None) -> VelocityModel:
    """Rectified-flow pretraining on the task dataset (deterministic)."""
    data, labels = make_dataset(cfg)
    model = VelocityModel.initialized(2, RngStream(cfg.model_seed), cond_dim=_cond_dim(cfg))
    return fm_pretrain(model, data, RngStream(cfg.data_seed).fork(1), cfg.pretrain_steps, cfg.pretrain_lr,
                       batch_size=cfg.pretrain_batch,
                       labels=labels if model.cond_dim else None, loss_log=loss_log)


def pretrain_key(cfg: ExperimentConfig) -> str:
    keys = ("task", "n_data", "data_seed", "model_seed", "pretrain_steps", "pretrain_lr", "pretrain_batch")
    text = json.dumps({k: getattr(cfg, k) for k in keys}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_or_pretrain(cfg: ExperimentConfig, cache_dir: str | None = None) -> tuple[VelocityModel, str]:
    """The configured checkpoint, a cached pretrain in ``cache_dir``, or a fresh one."""
    if cfg.checkpoint:
        return VelocityModel.load(cfg.checkpoint), cfg.checkpoint
    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"pretrained_{pretrain_key(cfg)}.json")
        if os.path.exists(path):
            return VelocityModel.load(path), path
    model = pretrain(cfg)
    if path:
        model.save(path)
    return model, path


def make_trainer(cfg: ExperimentConfig, model: VelocityModel, seed: int):
    reward = make_reward(cfg)
    sampler = make_prompt_sampler(cfg)
    rng = RngStream(seed)
    if cfg.variant == "neighbor":
        return NeighborGRPOTrainer(model, cfg.train, sampler, reward, rng)
    train = cfg.train if cfg.variant == "sde_windowed" else dataclasses.replace(cfg.train, sde_window=None)
    return SdeGRPOTrainer(model, train, sampler, reward, rng)


def evaluate(model: VelocityModel, cfg: ExperimentConfig, solver: str = "dpmpp"):
    """Deterministic samples from fixed eval noise; returns ``(x0, rewards)``."""
    reward = make_reward(cfg)
    n = cfg.eval_samples
    x1 = RngStream(cfg.eval_seed).gaussian(2 * n).reshape(n, 2)
    sched = uniform_schedule(cfg.train.T)
    if not model.cond_dim:
        x0 = rollout(model, solver, sched, x1).x0
        return x0, reward(x0)
    x0 = np.empty_like(x1)
    r = np.empty(n)
    modes = np.arange(n) % N_MODES
    for m in range(N_MODES):
        idx = np.flatnonzero(modes == m)
        c = one_hot(m, N_MODES)
        x0[idx] = rollout(model, solver, sched, x1[idx], c).x0
        r[idx] = reward(x0[idx], c)
    return x0, r


# ---------------------------------------------------------------------------
# one seed


@dataclass
class SeedResult:
    seed: int
    variant: str
    metrics_path: str
    samples_path: str
    iterations: int
    eval_before_mean: float
    eval_before_std: float
    eval_after_mean: float
    final_mean_reward: float
    auc_reward: float
    wall_s_per_iter: float
    aborted: str | None = None

    @property
    def gain_in_std(self) -> float:
        return (self.eval_after_mean - self.eval_before_mean) / self.eval_before_std


def _num(v) -> str:
    return repr(float(v))


def metrics_filename(variant: str, seed: int) -> str:
    return f"metrics_{variant}_seed{seed}.csv"


def samples_filename(variant: str, seed: int) -> str:
    return f"samples_{variant}_seed{seed}.csv"


def _write_samples(w, phase, x0, r, seed, variant, h):
    for i, (p, rv) in enumerate(zip(x0, r)):
        w.writerow([phase, i, _num(p[0]), _num(p[1]), _num(rv), seed, variant, h])


def run_seed(cfg: ExperimentConfig, model_dict: dict, seed: int, out_dir: str) -> SeedResult:
    """Train one seed, streaming metric rows to CSV as they are produced.

    A numerical abort leaves the rows written so far in place, then re-raises.
    """
    model = VelocityModel.from_dict(model_dict)
    h = cfg.config_hash()
    trainer = make_trainer(cfg, model, seed)
    mpath = os.path.join(out_dir, metrics_filename(cfg.variant, seed))
    spath = os.path.join(out_dir, samples_filename(cfg.variant, seed))
    x_before, r_before = evaluate(model, cfg)
    means, walls = [], []
    aborted = None
    with open(mpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for it in range(cfg.train.iterations):
            try:
                m = trainer.step()
            except NumericalAbort as e:
                aborted = f"iteration {it}: {e}"
                log.error("seed %d aborted at %s", seed, aborted)
                break
            wall = m["wall_ms"] if cfg.record_wall_time else 0.0
            means.append(m["mean_reward"])
            walls.append(wall)
            w.writerow([it, _num(m["mean_reward"]), _num(m["std_reward"]), _num(m["objective"]),
                        _num(m["frac_clipped"]), m["nfe_old"], _num(m["nfe_theta"]), f"{wall:.3f}",
                        seed, cfg.variant, h, ";".join(_num(a) for a in m["advantages"])])
            fh.flush()
    try:
        x_after, r_after = evaluate(trainer.model, cfg)
    except ValueError:
        # a diverged model can produce non-finite samples; keep what we have
        if not aborted:
            raise
        x_after, r_after = np.empty((0, 2)), np.full(1, np.nan)
    with open(spath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_COLUMNS)
        _write_samples(w, "before", x_before, r_before, seed, cfg.variant, h)
        _write_samples(w, "after", x_after, r_after, seed, cfg.variant, h)
    res = SeedResult(seed, cfg.variant, mpath, spath, len(means), float(r_before.mean()),
                     float(r_before.std()), float(r_after.mean()), final_mean(means), auc(means),
                     float(np.mean(walls)) / 1000.0 if walls else 0.0, aborted)
    if aborted:
        raise NumericalAbort(f"seed {seed} {aborted}")
    return res


def final_mean(curve, window: int = FINAL_WINDOW) -> float:
    """Mean of the last ``window`` per-iteration rewards."""
    curve = np.asarray(curve, dtype=float)
    return float(curve[-window:].mean()) if curve.size else float("nan")


def auc(curve) -> float:
    """Area under the reward curve per iteration (the curve mean)."""
    curve = np.asarray(curve, dtype=float)
    return float(curve.mean()) if curve.size else float("nan")


def iterations_to_reach(curve, level: float, window: int = FINAL_WINDOW) -> int | None:
    """First iteration count at which the trailing ``window`` mean is >= ``level``."""
    ma = moving_average(curve, window)
    hits = np.flatnonzero(ma[window - 1:] >= level) if len(ma) >= window else np.array([], int)
    return int(hits[0]) + window if hits.size else None


# ---------------------------------------------------------------------------
# whole experiment


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    out_dir: str
    checkpoint: str | None
    seeds: list = field(default_factory=list)

    def curves(self) -> dict:
        return {r.seed: read_metrics(r.metrics_path)["mean_reward"] for r in self.seeds}


def _seed_job(args):
    return run_seed(*args)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, model: VelocityModel | None = None) -> ExperimentResult:
    """Pretrain or load, train every seed, write CSVs, manifest and plots.

    Seeds are independent; with ``jobs > 1`` they run in separate processes.
    """
    cfg.validate()
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.json"))
    ckpt = cfg.checkpoint
    if model is None:
        model, ckpt = load_or_pretrain(cfg, out)
    md = model.to_dict()
    args = [(cfg, md, s, out) for s in cfg.seeds]
    results = []
    abort = None
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(_seed_job, a) for a in args]
            for f in futs:
                try:
                    results.append(f.result())
                except NumericalAbort as e:
                    abort = abort or e
    else:
        for a in args:
            try:
                results.append(run_seed(*a))
            except NumericalAbort as e:
                abort = e
                break
    res = ExperimentResult(cfg, out, ckpt, results)
    write_manifest(res, aborted=str(abort) if abort else None)
    plot_dir(out)
    if abort:
        raise abort
    return res


def write_manifest(res: ExperimentResult, aborted: str | None = None) -> str:
    cfg = res.config
    files = sorted(os.path.basename(p) for p in glob.glob(os.path.join(res.out_dir, "*.csv")))
    man = {
        "config_hash": cfg.config_hash(),
        "version": f"neighbor_grpo-{__version__}",
        "variant": cfg.variant,
        "seeds": list(cfg.seeds),
        "checkpoint": os.path.basename(res.checkpoint) if res.checkpoint else None,
        "status": "aborted" if aborted else "ok",
        "abort_reason": aborted,
        "files": files,
        "per_seed": [
            {k: v for k, v in dataclasses.asdict(r).items() if k not in ("metrics_path", "samples_path")
             and (cfg.record_wall_time or k != "wall_s_per_iter")}
            for r in res.seeds
        ],
    }
    path = os.path.join(res.out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(man, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# CSV readers and plots


def read_metrics(path) -> dict:
    """Columns of a metrics CSV as arrays (strings for the tag columns)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for col in METRIC_COLUMNS:
        vals = [r[col] for r in rows]
        if col in ("variant", "config_hash", "advantages"):
            out[col] = vals
        else:
            out[col] = np.array([float(v) for v in vals])
    return out


def read_samples(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for phase in ("before", "after"):
        sel = [r for r in rows if r["phase"] == phase]
        out[phase] = np.array([[float(r["x0"]), float(r["x1"])] for r in sel]).reshape(-1, 2)
    out["meta"] = {"config_hash": rows[0]["config_hash"], "seed": rows[0]["seed"],
                   "variant": rows[0]["variant"]} if rows else {}
    return out


def plot_dir(out_dir: str, smooth: int = 10) -> list:
    """(Re)build every SVG in ``out_dir`` from its CSV files."""
    written = []
    series, hashes, seeds = {}, set(), set()
    for path in sorted(glob.glob(os.path.join(out_dir, "metrics_*_seed*.csv"))):
        m = read_metrics(path)
        if not len(m["iter"]):
            continue
        variant, seed = m["variant"][0], int(m["seed"][0])
        series[f"{variant} s{seed}"] = (m["iter"] + 1, moving_average(m["mean_reward"], smooth))
        hashes.update(m["config_hash"])
        seeds.add(seed)
    if series:
        meta = {"config_hash": ",".join(sorted(hashes)), "seed": ",".join(map(str, sorted(seeds))),
                "smoothing": smooth}
        path = os.path.join(out_dir, "reward_curves.svg")
        with open(path, "w") as fh:
            fh.write(line_chart(series, f"mean group reward ({smooth}-iteration moving average)", meta))
        written.append(path)
    for path in sorted(glob.glob(os.path.join(out_dir, "samples_*_seed*.csv"))):
        s = read_samples(path)
        if not s["meta"]:
            continue
        svg = os.path.join(out_dir, os.path.basename(path).replace("samples_", "scatter_").replace(".csv", ".svg"))
        with open(svg, "w") as fh:
            fh.write(scatter({"before": s["before"], "after": s["after"]},
                             f"terminal samples, {s['meta']['variant']} seed {s['meta']['seed']}", s["meta"]))
        written.append(svg)
    return written


# ---------------------------------------------------------------------------
# sweeps


def run_sweep(cfg: ExperimentConfig, preset: str, out_dir: str | None = None, jobs: int = 1) -> str:
    """Run one preset grid; returns the path of the summary CSV.

    All grid points share one pretrained checkpoint.
    """
    if preset not in SWEEP_PRESETS:
        raise ConfigError(f"unknown sweep preset {preset!r}; choose from {sorted(SWEEP_PRESETS)}")
    cfg.validate()
    key, values = SWEEP_PRESETS[preset]
    root = out_dir or cfg.out_dir
    os.makedirs(root, exist_ok=True)
    model, ckpt = load_or_pretrain(cfg, root)
    if ckpt is None:
        ckpt = os.path.join(root, "pretrained.json")
        model.save(ckpt)
    rows = []
    for val in values:
        sub = cfg.replace(**{key: val}, out_dir=os.path.join(root, f"{key}={val}"), checkpoint=ckpt)
        res = run_experiment(sub, jobs=jobs, model=model)
        rows.append([sub.variant, f"{key}={val}",
                     _num(np.mean([r.final_mean_reward for r in res.seeds])),
                     _num(np.mean([r.auc_reward for r in res.seeds])),
                     _num(np.mean([r.wall_s_per_iter for r in res.seeds])),
                     ";".join(str(s) for s in sub.seeds), sub.config_hash()])
    path = os.path.join(root, f"sweep_{preset}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# training cost accounting


@dataclass(frozen=True)
class NfeRow:
    method: str
    solver_old: str
    nfe_old: int
    G: int
    B: int
    K: int

    @property
    def nfe_theta(self) -> float:
        return self.B / self.G * self.K


# training-cost configurations reported for the large-scale runs
REFERENCE_NFE_CONFIGS = (
    NfeRow("DanceGRPO", "DDIM", 25, 12, 12, 14),
    NfeRow("MixGRPO", "DDIM", 25, 12, 12, 14),
    NfeRow("MixGRPO-Flash", "DPM++", 8, 12, 12, 4),
    NfeRow("Neighbor GRPO 25-step", "DDIM", 25, 12, 12, 4),
    NfeRow("Neighbor GRPO 16-step", "DPM++", 16, 12, 4, 9),
    NfeRow("Neighbor GRPO 8-step", "DPM++", 8, 12, 4, 4),
)


def nfe_report(cfg: ExperimentConfig | None = None) -> list:
    """Reference rows plus, when given, the configured variant.

    The SDE baseline takes gradients for every member, so its ``B`` is ``G``.
    """
    rows = list(REFERENCE_NFE_CONFIGS)
    if cfg is not None:
        t = cfg.train
        if cfg.variant == "neighbor":
            rows.append(NfeRow("this config (neighbor)", t.rollout_solver, t.T, t.G, t.B, t.K))
        else:
            rows.append(NfeRow(f"this config ({cfg.variant})", "SDE", t.T, t.G, t.G, t.K))
    return rows


def format_nfe_table(rows) -> str:
    head = f"{'Method':<26}{'Solver':>8}{'NFE_old':>9}{'G':>5}{'B':>5}{'K':>5}{'NFE_theta':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.method:<26}{r.solver_old:>8}{r.nfe_old:>9}{r.G:>5}{r.B:>5}{r.K:>5}{r.nfe_theta:>11.2f}")
    return "\n".join(lines)
