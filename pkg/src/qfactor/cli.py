"""Command-line entry point.

Subcommands: train (writes run artifacts), reconstruct (joint-value table
of a trained matrix-game run), verify-theorem (random tabular sweep of the
factorization check and its greedy-consistency implication), and aggregate
(mean and confidence interval across runs).

Value precedence for training: explicit flags override config-file values,
which override the preset, which overrides the base defaults. Exit codes:
0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .envs import make_env
from .mixers import (
    igm_holds,
    random_factorization_instance,
    residual_factorization_holds,
)
from .nn import load_params, save_params
from .training import ALGOS, Trainer

_BASE = {"buffer": 5000, "batch": 32, "eps_min": 0.05, "eps_anneal": 50000,
         "lr": 5e-4}
_PRESETS = {
    "table1": {},
    "table2": {"buffer": 100000, "eps_min": 0.1, "eps_anneal": 2000000},
}
_CONFIG_KEYS = {"algo", "env", "env_params", "episodes", "seed", "buffer",
                "batch", "eps_min", "eps_anneal", "epsilon_fixed", "lr",
                "out"}
_ENV_FLAGS = ("n_predators", "n_prey", "capture_penalty")
_ENV_NAMES = ("matrix", "predator_prey", "switch", "checkers")


class ConfigError(Exception):
    pass


def _resolve_train_config(args):
    config = {"algo": None, "env": None, "env_params": {}, "episodes": None,
              "seed": 0, "epsilon_fixed": None, "out": None}
    config.update(_BASE)
    config.update(_PRESETS[args.preset])

    if args.config is not None:
        try:
            file_cfg = harness.read_manifest(args.config)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        env_params = file_cfg.pop("env_params", None)
        if env_params is not None:
            if not isinstance(env_params, dict):
                raise ConfigError("env_params must be an object")
            config["env_params"].update(env_params)
        config.update(file_cfg)

    for key in ("algo", "env", "episodes", "seed", "buffer", "batch",
                "eps_min", "eps_anneal", "epsilon_fixed", "out"):
        value = getattr(args, key)
        if value is not None:
            config[key] = value
    for key in _ENV_FLAGS:
        value = getattr(args, key)
        if value is not None:
            config["env_params"][key] = value

    if config["algo"] not in ALGOS:
        raise ConfigError(f"choose an algorithm from {ALGOS}")
    if config["env"] not in _ENV_NAMES:
        raise ConfigError(f"choose an environment from {_ENV_NAMES}")
    if not config["episodes"] or config["episodes"] < 1:
        raise ConfigError("a positive --episodes budget is required")
    if config["out"] is None:
        config["out"] = "{algo}_{env}_seed{seed}".format(**config)
    return config


def cmd_train(args):
    config = _resolve_train_config(args)
    try:
        env = make_env(config["env"], **config["env_params"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc))
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    harness.write_manifest(out / "run.json", config)

    trainer = Trainer(env, config["algo"], config["seed"],
                      buffer_size=config["buffer"],
                      batch_size=config["batch"], lr=config["lr"],
                      eps_min=config["eps_min"],
                      eps_anneal=config["eps_anneal"],
                      epsilon_fixed=config["epsilon_fixed"])

    def log(episode, score):
        print(f"episode {episode}: eval reward {score:.4f}")

    history = trainer.run(config["episodes"], log=log)
    harness.write_metrics_csv(out / "metrics.csv", history["metrics"])
    if config["algo"] == "rqn":
        harness.write_phi_csv(out / "phi.csv", history["phi"])
    save_params(out / "params.npz", trainer.modules)
    print(f"wrote artifacts to {out}")
    return 0


def cmd_reconstruct(args):
    run_dir = Path(args.run_dir)
    try:
        config = harness.read_manifest(run_dir / "run.json")
    except FileNotFoundError:
        raise ConfigError(f"no run manifest in {run_dir}")
    if config.get("env") != "matrix":
        raise ConfigError("reconstruction is defined for matrix-game runs")

    env = make_env("matrix")
    trainer = Trainer(env, config["algo"], config.get("seed", 0))
    try:
        load_params(run_dir / "params.npz", trainer.modules)
    except FileNotFoundError:
        raise ConfigError(f"no saved parameters in {run_dir}")
    table = harness.reconstruct_qtot(trainer.agent, config["algo"], env,
                                     mixer=trainer.mixer,
                                     heads=trainer.heads,
                                     estimator=trainer.estimator)
    for row in table:
        print("  ".join(f"{v:8.2f}" for v in row))
    harness.write_reconstruction_csv(run_dir / "reconstruction.csv", table)
    return 0


def cmd_verify_theorem(args):
    rng = np.random.default_rng(args.seed)
    satisfied = rejected = implication_failures = 0
    for _ in range(args.instances):
        for kind in ("satisfying", "random", "adversarial"):
            q_tables, phi, q_tot = random_factorization_instance(
                rng, args.agents, args.actions, kind)
            verified = residual_factorization_holds(q_tables, phi, q_tot)
            if verified and not igm_holds(q_tables, q_tot):
                implication_failures += 1
            if kind == "satisfying" and verified:
                satisfied += 1
            if kind == "adversarial" and not verified:
                rejected += 1
    print(f"instances per kind: {args.instances} "
          f"(agents={args.agents}, actions={args.actions})")
    print(f"satisfying instances verified: {satisfied}/{args.instances}")
    print(f"adversarial instances rejected: {rejected}/{args.instances}")
    print(f"greedy-consistency implication failures: {implication_failures}")
    ok = (satisfied == args.instances and rejected == args.instances
          and implication_failures == 0)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_aggregate(args):
    if len(args.run_dirs) < 2:
        raise ConfigError("aggregation needs at least two run directories")
    grid = None
    series = []
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "metrics.csv"
        try:
            episodes, values = harness.read_metrics_csv(path)
        except FileNotFoundError:
            raise ConfigError(f"no metrics file in {run_dir}")
        if grid is None:
            grid = episodes
        elif episodes != grid:
            raise ConfigError("runs have mismatched evaluation grids")
        series.append(values)
    mean, half = harness.aggregate_seeds(series)
    harness.write_aggregate_csv(args.out, grid, mean, half)
    print(f"wrote {args.out} from {len(series)} runs")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qfactor",
        description="Train and analyse cooperative value-factorization agents.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training job")
    train.add_argument("--algo", choices=ALGOS)
    train.add_argument("--env", choices=_ENV_NAMES)
    train.add_argument("--episodes", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--buffer", type=int)
    train.add_argument("--batch", type=int)
    train.add_argument("--eps-min", type=float)
    train.add_argument("--eps-anneal", type=int)
    train.add_argument("--epsilon-fixed", type=float)
    train.add_argument("--capture-penalty", type=float)
    train.add_argument("--n-predators", type=int)
    train.add_argument("--n-prey", type=int)
    train.add_argument("--preset", choices=sorted(_PRESETS),
                       default="table1")
    train.add_argument("--config", help="JSON file of config values")
    train.add_argument("--out", help="artifact directory")
    train.set_defaults(func=cmd_train)

    rec = sub.add_parser("reconstruct",
                         help="joint-value table of a matrix-game run")
    rec.add_argument("run_dir")
    rec.set_defaults(func=cmd_reconstruct)

    ver = sub.add_parser("verify-theorem",
                         help="random tabular sweep of the factorization check")
    ver.add_argument("--instances", type=int, default=1000)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--agents", type=int, default=2)
    ver.add_argument("--actions", type=int, default=3)
    ver.set_defaults(func=cmd_verify_theorem)

    agg = sub.add_parser("aggregate", help="combine metrics across runs")
    agg.add_argument("run_dirs", nargs="+")
    agg.add_argument("--out", default="aggregate.csv")
    agg.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
