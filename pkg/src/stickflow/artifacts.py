"""Run-directory persistence with provenance chaining.

Every run directory contains the resolved ``config.json``; its SHA-256 is
embedded in all other artifacts (a ``config_sha256`` field in JSON files, a
leading ``#`` comment line in CSV files).  All writers are deterministic:
reruns with identical config and seed produce byte-identical files (the
training trace's wallclock column is the one documented exception).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .backbone import FlowStack
from .base_mixture import StickBreakingBase
from .tail_estimator import TailIndexTable
from .tail_transform import TtfParams
from .vi import MixtureTailFlow

__all__ = [
    "RunArtifacts",
    "config_hash",
    "write_config",
    "model_to_dict",
    "model_from_dict",
    "save_run",
    "load_model",
    "load_config",
    "write_samples_csv",
    "read_samples_csv",
    "write_trace_csv",
    "write_json",
]


def _canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def config_hash(payload: dict) -> str:
    return hashlib.sha256(_canonical_json(payload).encode("utf-8")).hexdigest()


def write_config(run_dir, payload: dict) -> str:
    text = _canonical_json(payload)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_config(run_dir) -> tuple[dict, str]:
    with open(os.path.join(run_dir, "config.json")) as fh:
        text = fh.read()
    return json.loads(text), hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_json(path, payload: dict, cfg_hash: str):
    body = dict(payload)
    body["config_sha256"] = cfg_hash
    with open(path, "w") as fh:
        fh.write(_canonical_json(body))


def _array_or_none(arr):
    """JSON-safe array: non-finite entries become None (LIGHT sentinels)."""
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(arr).ravel()]


def model_to_dict(model: MixtureTailFlow) -> dict:
    bb = model.backbone
    ttf = []
    for p in model.ttf:
        if p is None:
            ttf.append(None)
        else:
            ttf.append({
                "mu": p.mu.tolist(),
                "sigma": p.sigma.tolist(),
                "xi_pos": _array_or_none(p.xi_pos),
                "xi_neg": _array_or_none(p.xi_neg),
            })
    return {
        "stage": model.stage,
        "dim": model.dim,
        "base": model.base.to_dict(),
        "backbone": {
            "dim": bb.dim,
            "n_blocks": bb.n_blocks,
            "bins": bb.bins,
            "hidden": bb.hidden,
            "bound": bb.bound,
            "params": {k: v.tolist() for k, v in sorted(bb.params.items())},
        },
        "ttf": ttf,
    }


def model_from_dict(payload: dict) -> MixtureTailFlow:
    base = StickBreakingBase.from_dict(payload["base"])
    bbp = payload["backbone"]
    backbone = FlowStack(dim=bbp["dim"], n_blocks=bbp["n_blocks"], bins=bbp["bins"],
                         hidden=bbp["hidden"], bound=bbp["bound"])
    for k, v in bbp["params"].items():
        backbone.params[k] = np.array(v, dtype=float)
    ttf = []
    for entry in payload["ttf"]:
        if entry is None:
            ttf.append(None)
        else:
            def _restore(vals):
                return np.array([np.inf if v is None else v for v in vals], dtype=float)

            ttf.append(TtfParams(
                mu=np.array(entry["mu"], dtype=float),
                sigma=np.array(entry["sigma"], dtype=float),
                xi_pos=_restore(entry["xi_pos"]),
                xi_neg=_restore(entry["xi_neg"]),
            ))
    return MixtureTailFlow(base=base, backbone=backbone, ttf=ttf,
                           stage=payload["stage"])


def write_samples_csv(path, x: np.ndarray, labels: np.ndarray, cfg_hash: str):
    x = np.atleast_2d(x)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256: {cfg_hash}\n")
        cols = [f"x{l + 1}" for l in range(x.shape[1])] + ["component"]
        fh.write(",".join(cols) + "\n")
        for row, lab in zip(x, labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")


def read_samples_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("x1"):
                continue
            rows.append([float(v) for v in line.strip().split(",")])
    arr = np.array(rows)
    return arr[:, :-1], arr[:, -1].astype(int)


def write_trace_csv(path, trace, cfg_hash: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256: {cfg_hash}\n")
        fh.write("iter,stage,elbo,wallclock\n")
        for it, stage, elbo, wall in trace:
            fh.write(f"{it},{stage},{elbo!r},{wall!r}\n")


@dataclass
class RunArtifacts:
    """Everything persisted for one experiment run."""

    config: dict
    model: MixtureTailFlow
    trace: list
    table: TailIndexTable | None
    samples: np.ndarray
    labels: np.ndarray
    run_dir: str = ""
    cfg_hash: str = field(default="", repr=False)


def save_run(run_dir, artifacts: RunArtifacts) -> str:
    os.makedirs(run_dir, exist_ok=True)
    cfg_hash = write_config(run_dir, artifacts.config)
    artifacts.run_dir = run_dir
    artifacts.cfg_hash = cfg_hash
    payload = model_to_dict(artifacts.model)
    write_json(os.path.join(run_dir, "model.json"), payload, cfg_hash)
    if artifacts.table is not None:
        artifacts.table.to_csv(os.path.join(run_dir, "tails.csv"), config_hash=cfg_hash)
    write_trace_csv(os.path.join(run_dir, "elbo_trace.csv"), artifacts.trace, cfg_hash)
    write_samples_csv(os.path.join(run_dir, "samples.csv"), artifacts.samples,
                      artifacts.labels, cfg_hash)
    return cfg_hash


def load_model(run_dir) -> MixtureTailFlow:
    with open(os.path.join(run_dir, "model.json")) as fh:
        payload = json.load(fh)
    return model_from_dict(payload)
