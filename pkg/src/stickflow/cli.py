"""Batch experiment driver.

Subcommands: train | estimate-tails | sample | evaluate | mcmc |
simulate-wind.  Configs are written in TOML; the resolved configuration is
echoed verbatim into the run directory as JSON and its hash is embedded in
every other artifact.  Exit codes: 0 success, 1 validation error (nothing
written), 2 numerical abort (checkpoint written).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import artifacts, wind
from .evaluation import adaptive_rwm, evaluate_model
from .numerics import RngStream
from .tail_estimator import build_table
from .targets import make_target
from .vi import MixtureTailFlow, ModelConfig, NumericalAbort, TrainConfig, sample, train

__all__ = ["main"]

_ENV_OUT_ROOT = "STICKFLOW_RUNS"


class ConfigError(ValueError):
    pass


_TARGET_KEYS = {"name", "csv", "thresholds", "nu", "dim"}
_MODEL_KEYS = {"K", "blocks", "bins", "hidden", "bound"}
_TRAIN_KEYS = {
    "seed", "iters_stage1", "iters_stage3", "mc_samples_per_component",
    "learning_rate", "tail_n", "tail_j", "tail_nu", "weight_threshold",
    "entropy_prune", "train_backbone_stage1", "init_radius", "anchor_samples",
    "n_output_samples",
}
_OUTPUT_KEYS = {"dir"}
_MCMC_KEYS = {"iters", "init", "thin"}


def _check_keys(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")


def load_run_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"malformed config {path}: {err}") from None
    _check_keys(raw, {"target", "model", "train", "output", "mcmc"}, "top level")
    if "target" not in raw or "name" not in raw.get("target", {}):
        raise ConfigError("config needs a [target] section with a name")
    _check_keys(raw.get("target", {}), _TARGET_KEYS, "target")
    _check_keys(raw.get("model", {}), _MODEL_KEYS, "model")
    _check_keys(raw.get("train", {}), _TRAIN_KEYS, "train")
    _check_keys(raw.get("output", {}), _OUTPUT_KEYS, "output")
    _check_keys(raw.get("mcmc", {}), _MCMC_KEYS, "mcmc")
    return raw


def _resolve(raw: dict, seed_override=None, out_override=None) -> dict:
    model_cfg = ModelConfig(
        K=int(raw.get("model", {}).get("K", 20)),
        n_blocks=int(raw.get("model", {}).get("blocks", 2)),
        bins=int(raw.get("model", {}).get("bins", 3)),
        hidden=int(raw.get("model", {}).get("hidden", 64)),
        bound=float(raw.get("model", {}).get("bound", 10.0)),
    )
    tr = dict(raw.get("train", {}))
    if seed_override is not None:
        tr["seed"] = seed_override
    train_cfg = TrainConfig(**tr)
    out_dir = out_override or raw.get("output", {}).get("dir")
    if out_dir is None:
        root = os.environ.get(_ENV_OUT_ROOT, "runs")
        out_dir = os.path.join(root, raw["target"]["name"])
    resolved = {
        "target": dict(raw["target"]),
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "output": {"dir": out_dir},
    }
    if "mcmc" in raw:
        resolved["mcmc"] = dict(raw["mcmc"])
    return resolved


def _build_target(tspec: dict):
    kwargs = {}
    if tspec["name"].replace("-", "_") == "wind":
        if "csv" not in tspec:
            raise ConfigError("wind target needs a csv path")
        thresholds = tspec.get("thresholds")
        if thresholds is None:
            raise ConfigError("wind target needs a thresholds entry")
        if isinstance(thresholds, str):
            with open(thresholds) as fh:
                thresholds = json.load(fh)
        if "values" in thresholds:
            thresholds = dict(thresholds)
            thresholds["values"] = np.asarray(thresholds["values"], dtype=float)
        kwargs = {"csv_path": tspec["csv"], "thresholds": thresholds}
    else:
        kwargs = {k: v for k, v in tspec.items() if k not in ("name",)}
    return make_target(tspec["name"], **kwargs)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    raw = load_run_config(args.config)
    resolved = _resolve(raw, seed_override=args.seed, out_override=args.out)
    target = _build_target(resolved["target"])
    model_cfg = ModelConfig(
        K=resolved["model"]["K"], n_blocks=resolved["model"]["n_blocks"],
        bins=resolved["model"]["bins"], hidden=resolved["model"]["hidden"],
        bound=resolved["model"]["bound"])
    train_cfg = TrainConfig(**resolved["train"])
    run_dir = resolved["output"]["dir"]
    try:
        model, trace, table = train(target, model_cfg, train_cfg)
    except NumericalAbort as err:
        os.makedirs(run_dir, exist_ok=True)
        cfg_hash = artifacts.write_config(run_dir, resolved)
        artifacts.write_json(os.path.join(run_dir, "checkpoint.json"),
                             artifacts.model_to_dict(err.model), cfg_hash)
        artifacts.write_trace_csv(os.path.join(run_dir, "elbo_trace.csv"),
                                  err.trace, cfg_hash)
        print(f"numerical abort: {err}", file=sys.stderr)
        return 2
    x, labels = sample(model, train_cfg.n_output_samples,
                       RngStream(train_cfg.seed).derive("samples"))
    bundle = artifacts.RunArtifacts(config=resolved, model=model, trace=trace,
                                    table=table, samples=x, labels=labels)
    artifacts.save_run(run_dir, bundle)
    print(run_dir)
    return 0


def _cmd_estimate_tails(args) -> int:
    target = make_target(args.target)
    mu = np.zeros(target.dim) if args.mu is None else np.array(args.mu, dtype=float)
    sigma = np.ones(target.dim) if args.sigma is None else np.array(args.sigma, dtype=float)
    if mu.shape != (target.dim,) or sigma.shape != (target.dim,):
        print(f"--mu/--sigma must have {target.dim} entries", file=sys.stderr)
        return 1
    table = build_table(target.log_density, [(0, mu, sigma, 1.0)], n=args.n,
                        j=args.j, nu=args.nu, rng=RngStream(args.seed, 17))
    table.to_csv(args.out)
    print(args.out)
    return 0


def _cmd_sample(args) -> int:
    model = artifacts.load_model(args.run)
    _, cfg_hash = artifacts.load_config(args.run)
    x, labels = sample(model, args.n, RngStream(args.seed).derive("samples"))
    out = args.out or os.path.join(args.run, f"samples_{args.n}.csv")
    artifacts.write_samples_csv(out, x, labels, cfg_hash)
    print(out)
    return 0


def _cmd_evaluate(args) -> int:
    config, cfg_hash = artifacts.load_config(args.run)
    model = artifacts.load_model(args.run)
    target = _build_target(config["target"])
    report = evaluate_model(target, model, n=args.n, seeds=list(range(args.seeds)),
                            rng=RngStream(args.seed, 101))
    out = os.path.join(args.run, "diagnostics.json")
    artifacts.write_json(out, report.to_dict(), cfg_hash)
    print(out)
    return 0


def _cmd_mcmc(args) -> int:
    raw = load_run_config(args.config)
    resolved = _resolve(raw, seed_override=args.seed, out_override=args.out)
    target = _build_target(resolved["target"])
    mspec = resolved.get("mcmc", {})
    iters = args.iters or int(mspec.get("iters", 100_000))
    thin = args.thin or int(mspec.get("thin", max(1, iters // 20_000)))
    init = np.array(mspec.get("init", np.zeros(target.dim)), dtype=float)
    run_dir = resolved["output"]["dir"]
    try:
        chain, summary = adaptive_rwm(target.log_density, init, iters,
                                      RngStream(resolved["train"]["seed"], 7))
    except (ValueError, RuntimeError) as err:
        print(f"mcmc failed: {err}", file=sys.stderr)
        return 2
    os.makedirs(run_dir, exist_ok=True)
    cfg_hash = artifacts.write_config(run_dir, resolved)
    path = os.path.join(run_dir, "mcmc_chain.csv")
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256: {cfg_hash}\n")
        fh.write(",".join(f"x{l + 1}" for l in range(target.dim)) + "\n")
        for row in chain.draws[::thin]:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    artifacts.write_json(os.path.join(run_dir, "mcmc_summary.json"), summary, cfg_hash)
    print(run_dir)
    return 0


def _cmd_simulate_wind(args) -> int:
    if args.params is not None:
        with open(args.params) as fh:
            payload = json.load(fh)
        params = wind.WindParams.from_vector(np.array(payload["vector"], dtype=float))
    else:
        params = wind.default_true_params()
    thresholds = wind.default_thresholds()
    data = wind.simulate_wind(params, args.days, RngStream(args.seed, 11),
                              thresholds=thresholds, lam=args.rate)
    wind.write_wind_csv(data, args.out)
    stem = os.path.splitext(args.out)[0]
    with open(stem + ".thresholds.json", "w") as fh:
        json.dump({"kind": "absolute", "values": thresholds.tolist()}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")
    with open(stem + ".true_params.json", "w") as fh:
        json.dump({"vector": params.to_vector().tolist(),
                   "names": wind.PARAM_NAMES, "rate": args.rate}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")
    print(args.out)
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stickflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the three-stage training pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("estimate-tails", help="standalone directional tail table")
    p.add_argument("--target", required=True)
    p.add_argument("--n", type=int, default=200_000)
    p.add_argument("--j", type=int, default=30)
    p.add_argument("--nu", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mu", type=float, nargs="+", default=None)
    p.add_argument("--sigma", type=float, nargs="+", default=None)
    p.add_argument("--out", default="tails.csv")
    p.set_defaults(func=_cmd_estimate_tails)

    p = sub.add_parser("sample", help="draw from a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("evaluate", help="forward KL / ESS diagnostics for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("mcmc", help="adaptive random-walk Metropolis reference")
    p.add_argument("--config", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_mcmc)

    p = sub.add_parser("simulate-wind", help="synthetic seasonal wind dataset")
    p.add_argument("--days", type=int, default=366)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--params", default=None)
    p.add_argument("--out", default="wind.csv")
    p.set_defaults(func=_cmd_simulate_wind)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, wind.WindDataError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
