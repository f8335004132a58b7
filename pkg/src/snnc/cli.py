"""Reproducible experiment driver.

Commands: train, eval, attack, sweep-sigma, at-baseline, learn-sigma,
gradcheck, mc-validate.  A JSON config file supplies defaults; flags
override file values.  Every artifact (CSV, SVG, checkpoint) embeds the
resolved config hash and master seed, and identical invocations reproduce
identical bytes.  Exit codes: 0 success, 1 runtime failure, 2 bad config.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import __version__
from .attacks import Expectation, Randomized, robustness_curve
from .backprop import finite_difference_check
from .data import load_cifar10, load_mnist, subset, synthetic_digits
from .errors import ConfigError, FormatError, ShapeError, TrainingDiverged
from .loss import Bimodel, Plain
from .moments import VarianceMode, mc_forward_moments
from .network import (Conv, Flatten, FullyConnected, MeanPool, ModelConfig,
                      ReLU, config_from_dict, forward_stochastic, init_params,
                      load_checkpoint, preset_configs, save_checkpoint)
from .plotting import plot_eval_curves, plot_history
from .reporting import config_hash, write_csv
from .train import SigmaPolicy, TrainSchedule, evaluate, train, \
    train_adversarial_baseline

COMMANDS = ("train", "eval", "attack", "sweep-sigma", "at-baseline",
            "learn-sigma", "gradcheck", "mc-validate")

DEFAULT_CONFIG = {
    "model": "mnist_lenet",
    "dataset": {
        "kind": "synthetic",
        "dir": None,
        "train_subset": None,
        "test_subset": None,
        "n_train": 4000,
        "n_test": 1000,
        "noise": 0.12,
        "gen_seed": 2024,
    },
    "schedule": {
        "epochs": 5,
        "batch_size": 64,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "eval_every": 1,
    },
    "sigma": {"policy": "fixed", "value": 0.3, "alpha": 0.25},
    "variance_mode": "diagonal",
    "attack": {
        "name": "pgd",
        "eps_grid": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
        "iterations": 40,
        "step_frac": 0.1,
        "random_start": True,
        "inference": "expectation",
        "votes": 100,
        "inference_sigma": None,
    },
    "out_dir": "runs/out",
    "seed": 0,
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(cfg: dict) -> list[str]:
    problems = []

    def check(cond, msg):
        if not cond:
            problems.append(msg)

    model = cfg.get("model")
    if isinstance(model, str):
        check(model in preset_configs(), f"model: unknown preset {model!r}")
    elif isinstance(model, dict):
        try:
            config_from_dict(model)
        except (FormatError, ShapeError, ValueError) as exc:
            problems.append(f"model: {exc}")
    else:
        problems.append("model: must be a preset name or an inline config")

    ds = cfg.get("dataset", {})
    check(ds.get("kind") in ("synthetic", "mnist", "cifar10"),
          f"dataset.kind: must be synthetic|mnist|cifar10, got {ds.get('kind')!r}")
    if ds.get("kind") in ("mnist", "cifar10"):
        check(isinstance(ds.get("dir"), str),
              "dataset.dir: required for file-backed datasets")
    for key in ("train_subset", "test_subset"):
        v = ds.get(key)
        check(v is None or (isinstance(v, int) and v > 0),
              f"dataset.{key}: must be a positive integer or null")
    for key in ("n_train", "n_test"):
        check(isinstance(ds.get(key), int) and ds.get(key) > 0,
              f"dataset.{key}: must be a positive integer")

    sch = cfg.get("schedule", {})
    check(isinstance(sch.get("epochs"), int) and sch["epochs"] > 0,
          "schedule.epochs: must be a positive integer")
    check(isinstance(sch.get("batch_size"), int) and sch["batch_size"] > 0,
          "schedule.batch_size: must be a positive integer")
    check(isinstance(sch.get("learning_rate"), (int, float))
          and sch.get("learning_rate", 0) > 0,
          "schedule.learning_rate: must be > 0")
    check(isinstance(sch.get("momentum"), (int, float))
          and 0 <= sch.get("momentum", -1) < 1,
          "schedule.momentum: must lie in [0, 1)")

    sig = cfg.get("sigma", {})
    check(sig.get("policy") in ("fixed", "learnable", "bimodel"),
          f"sigma.policy: must be fixed|learnable|bimodel, got {sig.get('policy')!r}")
    check(isinstance(sig.get("value"), (int, float)) and sig.get("value", -1) >= 0,
          "sigma.value: must be >= 0")
    if sig.get("policy") == "bimodel":
        check(isinstance(sig.get("alpha"), (int, float)) and sig.get("alpha", 0) > 0,
              "sigma.alpha: must be > 0 for bimodel")

    check(cfg.get("variance_mode") in ("identity", "diagonal"),
          f"variance_mode: must be identity|diagonal, got {cfg.get('variance_mode')!r}")

    atk = cfg.get("attack", {})
    check(atk.get("name") in ("fgsm", "pgd", "adaptive"),
          f"attack.name: must be fgsm|pgd|adaptive, got {atk.get('name')!r}")
    grid = atk.get("eps_grid")
    ok_grid = (isinstance(grid, list) and grid
               and all(isinstance(e, (int, float)) and e >= 0 for e in grid)
               and all(b > a for a, b in zip(grid, grid[1:])))
    check(ok_grid, "attack.eps_grid: must be a strictly increasing list of "
                   "nonnegative numbers")
    check(isinstance(atk.get("iterations"), int) and atk["iterations"] >= 1,
          "attack.iterations: must be >= 1")
    check(atk.get("inference") in ("expectation", "randomized"),
          "attack.inference: must be expectation|randomized")
    check(isinstance(atk.get("votes"), int) and atk["votes"] >= 1,
          "attack.votes: must be >= 1")

    check(isinstance(cfg.get("seed"), int), "seed: must be an integer")
    check(isinstance(cfg.get("out_dir"), str), "out_dir: must be a path")
    return problems


def resolve_config(path, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path) as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"])
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file is not valid JSON: {exc}"])
        if not isinstance(file_cfg, dict):
            raise ConfigError(["config file must hold a JSON object"])
        cfg = _deep_merge(cfg, file_cfg)
    cfg = _deep_merge(cfg, overrides)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    model = cfg["model"]
    if isinstance(model, str):
        return preset_configs()[model]
    return config_from_dict(model)


def _datasets(cfg: dict):
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        train_set, test_set = synthetic_digits(ds["n_train"], ds["n_test"],
                                               seed=ds["gen_seed"],
                                               noise=ds["noise"])
    elif ds["kind"] == "mnist":
        train_set, test_set = load_mnist(ds["dir"])
    else:
        train_set, test_set = load_cifar10(ds["dir"])
    if ds["train_subset"]:
        train_set = subset(train_set, ds["train_subset"], cfg["seed"])
    if ds["test_subset"]:
        test_set = subset(test_set, ds["test_subset"], cfg["seed"] + 1)
    return train_set, test_set


def _schedule(cfg: dict) -> TrainSchedule:
    sch = cfg["schedule"]
    return TrainSchedule(epochs=sch["epochs"], batch_size=sch["batch_size"],
                         learning_rate=sch["learning_rate"],
                         momentum=sch["momentum"], seed=cfg["seed"],
                         variance_mode=VarianceMode(cfg["variance_mode"]),
                         eval_every=sch["eval_every"])


def _sigma_policy(cfg: dict) -> SigmaPolicy:
    sig = cfg["sigma"]
    if sig["policy"] == "fixed":
        return SigmaPolicy.fixed(sig["value"])
    if sig["policy"] == "learnable":
        return SigmaPolicy.learnable(sig["value"])
    return SigmaPolicy.bimodel(sig["value"], sig["alpha"])


def _meta(cfg: dict, command: str) -> dict:
    return {"config_hash": config_hash({"command": command, **cfg}),
            "seed": cfg["seed"], "version": __version__}


def _write_history(path, history, meta) -> None:
    write_csv(path, ("epoch", "loss", "clean_acc", "sigma"), history.rows(),
              meta)


def _inference(cfg: dict):
    atk = cfg["attack"]
    if atk["inference"] == "expectation":
        return Expectation()
    sigma = atk["inference_sigma"]
    if sigma is None:
        sigma = cfg["sigma"]["value"]
    return Randomized(sigma=float(sigma), votes=atk["votes"])


def cmd_train(cfg: dict, out: str, policy: SigmaPolicy | None = None,
              tag: str = "model") -> int:
    model = _model_config(cfg)
    train_set, _ = _datasets(cfg)
    params, history = train(model, train_set, _schedule(cfg),
                            policy or _sigma_policy(cfg))
    meta = _meta(cfg, "train")
    save_checkpoint(os.path.join(out, f"{tag}.snnc"), params)
    hist_csv = os.path.join(out, "history.csv")
    _write_history(hist_csv, history, meta)
    plot_history(hist_csv, os.path.join(out, "history.svg"))
    print(f"final clean accuracy {history.records[-1].clean_acc:.4f}, "
          f"sigma {params.sigma:.4f}")
    return 0


def cmd_eval(cfg: dict, out: str, model_path: str) -> int:
    params = load_checkpoint(model_path)
    _, test_set = _datasets(cfg)
    acc = evaluate(params, test_set)
    print(f"accuracy {acc:.6f} on {test_set.name} ({len(test_set)} examples)")
    return 0


def cmd_attack(cfg: dict, out: str, model_path: str) -> int:
    params = load_checkpoint(model_path)
    _, test_set = _datasets(cfg)
    atk = cfg["attack"]
    curve = robustness_curve(
        params, test_set, atk["name"], atk["eps_grid"], _inference(cfg),
        iterations=atk["iterations"], step_frac=atk["step_frac"],
        random_start=atk["random_start"], seed=cfg["seed"],
        attack_sigma=atk["inference_sigma"],
        mode=VarianceMode(cfg["variance_mode"]))
    meta = _meta(cfg, "attack")
    path = os.path.join(out, "curve.csv")
    write_csv(path, ("eps", "accuracy", "attack", "inference", "sigma", "seed"),
              curve.rows(), meta)
    plot_eval_curves([path], os.path.join(out, "curve.svg"))
    for eps, acc in curve.points:
        print(f"eps={eps:g} accuracy={acc:.4f}")
    return 0


def cmd_sweep_sigma(cfg: dict, out: str, sigmas: list[float]) -> int:
    model = _model_config(cfg)
    train_set, test_set = _datasets(cfg)
    schedule = _schedule(cfg)
    atk = cfg["attack"]
    meta = _meta(cfg, "sweep-sigma")
    curve_paths = []
    for sigma in sigmas:
        if sigma == 0.0:
            # the sigma=0 member of a sweep is the conventional baseline
            # model (the stochastic loss is degenerate at zero noise)
            params, _ = train_adversarial_baseline(model, train_set, schedule,
                                                   eps=0.0)
        else:
            params, _ = train(model, train_set, schedule,
                              SigmaPolicy.fixed(sigma))
        save_checkpoint(os.path.join(out, f"model_sigma_{sigma:g}.snnc"), params)
        curve = robustness_curve(
            params, test_set, atk["name"], atk["eps_grid"], Expectation(),
            iterations=atk["iterations"], step_frac=atk["step_frac"],
            random_start=atk["random_start"], seed=cfg["seed"])
        path = os.path.join(out, f"curve_sigma_{sigma:g}.csv")
        write_csv(path, ("eps", "accuracy", "attack", "inference", "sigma",
                         "seed"), curve.rows(), meta)
        curve_paths.append(path)
        print(f"sigma={sigma:g}: " + " ".join(
            f"acc(eps={e:g})={a:.3f}" for e, a in curve.points))
    plot_eval_curves(curve_paths, os.path.join(out, "sweep.svg"),
                     title="Robustness across training noise levels")
    return 0


def cmd_at_baseline(cfg: dict, out: str, eps: float) -> int:
    model = _model_config(cfg)
    train_set, _ = _datasets(cfg)
    params, history = train_adversarial_baseline(model, train_set,
                                                 _schedule(cfg), eps)
    meta = _meta(cfg, "at-baseline")
    save_checkpoint(os.path.join(out, "model_at.snnc"), params)
    hist_csv = os.path.join(out, "history.csv")
    _write_history(hist_csv, history, meta)
    plot_history(hist_csv, os.path.join(out, "history.svg"),
                 title=f"Adversarial training (eps={eps:g})")
    print(f"final clean accuracy {history.records[-1].clean_acc:.4f}")
    return 0


def cmd_learn_sigma(cfg: dict, out: str) -> int:
    sig = cfg["sigma"]
    if sig["policy"] == "bimodel":
        policy = SigmaPolicy.bimodel(sig["value"], sig["alpha"])
    else:
        policy = SigmaPolicy.learnable(sig["value"])
    code = cmd_train(cfg, out, policy=policy)
    return code


def _tiny_config() -> ModelConfig:
    return ModelConfig((1, 8, 8),
                       (Conv(2, 3, 3), ReLU(), MeanPool(2, 2), Flatten(),
                        FullyConnected(10)), 10)


def cmd_gradcheck(cfg: dict, out: str, tol: float, n_seeds: int) -> int:
    gen = np.random.default_rng(cfg["seed"])
    worst: dict[str, list] = {}
    combos = [(VarianceMode.DIAGONAL, Plain()),
              (VarianceMode.DIAGONAL, Bimodel(0.25)),
              (VarianceMode.IDENTITY, Plain()),
              (VarianceMode.IDENTITY, Bimodel(0.25))]
    config = _tiny_config()
    for s in range(n_seeds):
        params = init_params(config, cfg["seed"] + s).with_sigma(0.5)
        x = gen.uniform(0.0, 1.0, size=config.input_shape)
        k = int(gen.integers(0, config.n_classes))
        y = np.zeros(config.n_classes)
        y[k] = 1.0
        for mode, policy in combos:
            rep = finite_difference_check(params, x, k, y, mode, policy)
            for group, stats in rep.groups.items():
                worst.setdefault(group, []).append(
                    (stats.max_rel, stats.mean_rel, stats.count))
    rows = []
    overall = 0.0
    for group, stats in worst.items():
        max_rel = max(s[0] for s in stats)
        mean_rel = float(np.mean([s[1] for s in stats]))
        count = sum(s[2] for s in stats)
        overall = max(overall, max_rel)
        rows.append((group, max_rel, mean_rel, count))
    write_csv(os.path.join(out, "gradcheck.csv"),
              ("group", "max_rel_err", "mean_rel_err", "count"), rows,
              _meta(cfg, "gradcheck"))
    print(f"gradcheck max relative error {overall:.3e} over "
          f"{n_seeds} seeds x {len(combos)} mode/policy combos (tol {tol:g})")
    return 0 if overall <= tol else 1


def cmd_mc_validate(cfg: dict, out: str, samples: int) -> int:
    # pure-affine net: analytic moments must match sampling within 4 SE
    config = ModelConfig((1, 1, 6), (FullyConnected(5), FullyConnected(3)), 3)
    gen = np.random.default_rng(cfg["seed"])
    rows = []
    violations = 0
    for si, sigma in enumerate((0.5, 1.0)):
        params = init_params(config, cfg["seed"] + si).with_sigma(sigma)
        x = gen.uniform(-1.0, 1.0, size=(1, 1, 6))
        analytic, _ = forward_stochastic(params, x, VarianceMode.DIAGONAL)
        mc = mc_forward_moments(params, x, sigma, samples, seed=cfg["seed"] + si)
        se_mean = np.sqrt(analytic.var / samples)
        se_var = analytic.var * np.sqrt(2.0 / (samples - 1))
        for unit in range(analytic.mean.shape[0]):
            z_mean = abs(analytic.mean[unit] - mc.mean[unit]) / se_mean[unit]
            z_var = abs(analytic.var[unit] - mc.var[unit]) / se_var[unit]
            if z_mean > 4.0 or z_var > 4.0:
                violations += 1
            rows.append((sigma, unit, analytic.mean[unit], mc.mean[unit],
                         z_mean, analytic.var[unit], mc.var[unit], z_var))
    write_csv(os.path.join(out, "mc_validate.csv"),
              ("sigma", "unit", "analytic_mean", "mc_mean", "z_mean",
               "analytic_var", "mc_var", "z_var"), rows,
              _meta(cfg, "mc-validate"))
    print(f"mc-validate: {len(rows)} affine-regime units, "
          f"{violations} beyond 4 standard errors")
    return 0 if violations == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snnc",
        description="Train and evaluate noise-hardened classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--sigma", type=float, help="noise level override")
        p.add_argument("--mode", choices=("identity", "diagonal"),
                       help="variance propagation mode")
        p.add_argument("--eps-grid", help="comma-separated attack budgets")

    p = sub.add_parser("train", help="stochastic training run")
    common(p)
    p = sub.add_parser("eval", help="clean accuracy of a checkpoint")
    common(p)
    p.add_argument("--model-path", required=True)
    p = sub.add_parser("attack", help="robustness curve for a checkpoint")
    common(p)
    p.add_argument("--model-path", required=True)
    p = sub.add_parser("sweep-sigma", help="train and attack across sigmas")
    common(p)
    p.add_argument("--sigmas", default="0,0.3,0.6",
                   help="comma-separated training noise levels")
    p = sub.add_parser("at-baseline", help="PGD adversarial-training baseline")
    common(p)
    p.add_argument("--eps", type=float, default=0.1)
    p = sub.add_parser("learn-sigma", help="train with learnable sigma")
    common(p)
    p.add_argument("--bimodel", action="store_true",
                   help="add the -alpha*sigma^2 reward")
    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seeds", type=int, default=5)
    p = sub.add_parser("mc-validate", help="analytic vs Monte-Carlo moments")
    common(p)
    p.add_argument("--samples", type=int, default=100_000)
    return parser


def run(command: str, cfg: dict, args) -> int:
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    if command == "train":
        return cmd_train(cfg, out)
    if command == "eval":
        return cmd_eval(cfg, out, args.model_path)
    if command == "attack":
        return cmd_attack(cfg, out, args.model_path)
    if command == "sweep-sigma":
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
        return cmd_sweep_sigma(cfg, out, sigmas)
    if command == "at-baseline":
        return cmd_at_baseline(cfg, out, args.eps)
    if command == "learn-sigma":
        if args.bimodel:
            cfg = _deep_merge(cfg, {"sigma": {"policy": "bimodel"}})
        elif cfg["sigma"]["policy"] == "fixed":
            cfg = _deep_merge(cfg, {"sigma": {"policy": "learnable"}})
        return cmd_learn_sigma(cfg, out)
    if command == "gradcheck":
        return cmd_gradcheck(cfg, out, args.tol, args.seeds)
    if command == "mc-validate":
        return cmd_mc_validate(cfg, out, args.samples)
    raise ValueError(f"unknown command {command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.sigma is not None:
        overrides["sigma"] = {"value": args.sigma}
    if args.mode is not None:
        overrides["variance_mode"] = args.mode
    if args.eps_grid is not None:
        try:
            grid = [float(e) for e in args.eps_grid.split(",") if e.strip()]
        except ValueError:
            print("error: --eps-grid must be comma-separated numbers",
                  file=sys.stderr)
            return 2
        overrides["attack"] = {"eps_grid": grid}
    try:
        cfg = resolve_config(args.config, overrides)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    try:
        return run(args.command, cfg, args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (FormatError, ShapeError, TrainingDiverged, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
