"""Command line entry point.

Exit codes: 0 success, 1 config error, 2 numerical abort (or a failed
``verify`` check), 3 IO error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import SWEEP_PRESETS, ConfigError, ExperimentConfig
from .neighbor import NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = list(args.seed)
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    return (cfg.replace(**overrides) if overrides else cfg).validate()


def cmd_pretrain(args) -> int:
    from .experiment import load_or_pretrain

    cfg = _load_config(args)
    _, path = load_or_pretrain(cfg.replace(checkpoint=None), cfg.out_dir)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiment import run_experiment

    cfg = _load_config(args)
    res = run_experiment(cfg, jobs=args.jobs)
    for r in res.seeds:
        print(f"{r.variant} seed {r.seed}: eval reward {r.eval_before_mean:.4f} -> {r.eval_after_mean:.4f} "
              f"({r.gain_in_std:+.2f} pretrain std), final group reward {r.final_mean_reward:.4f}")
    print(f"outputs in {res.out_dir} (config hash {cfg.config_hash()})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import run_sweep

    cfg = _load_config(args)
    path = run_sweep(cfg, args.preset, cfg.out_dir, jobs=args.jobs)
    with open(path) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_nfe(args) -> int:
    from .experiment import format_nfe_table, nfe_report

    cfg = _load_config(args) if args.config or args.variant else None
    print(format_nfe_table(nfe_report(cfg)))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .experiment import plot_dir

    if not os.path.isdir(args.out):
        raise FileNotFoundError(f"no such run directory: {args.out}")
    for path in plot_dir(args.out):
        print(path)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .checks import run_all

    results = run_all(args.out, include_training=not args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neighbor-grpo",
                                description="Neighbor GRPO and an SDE-GRPO baseline on 2-D rectified flows.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=True, seed=True):
        sp.add_argument("--config", help="JSON config (defaults when omitted)")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        if seed:
            sp.add_argument("--seed", type=int, nargs="+", help="seed(s), overriding the config list")
        if variant:
            sp.add_argument("--variant", choices=("neighbor", "sde", "sde_windowed"))

    sp = sub.add_parser("pretrain", help="rectified-flow pretraining; prints the checkpoint path")
    common(sp, variant=False, seed=False)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train", help="fine-tune every seed and write metrics, samples and plots")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sweep", help="run an ablation grid and write a summary CSV")
    common(sp)
    sp.add_argument("--preset", choices=sorted(SWEEP_PRESETS), required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("nfe", help="training-cost table (NFE_old, NFE_theta = B/G * K)")
    common(sp, seed=False)
    sp.set_defaults(fn=cmd_nfe)

    sp = sub.add_parser("plot", help="rebuild SVG plots of a run directory from its CSVs")
    sp.add_argument("--out", required=True, help="run directory")
    sp.set_defaults(fn=cmd_plot)

    sp = sub.add_parser("verify", help="run the oracle and invariant checks")
    sp.add_argument("--out", help="directory for the training checks' outputs")
    sp.add_argument("--quick", action="store_true", help="skip the two training checks")
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
