"""Experiment orchestration and persistence.

Subcommands: simulate, train, sample, oracle, evaluate, sweep, report.
Configs are strict JSON (unknown keys rejected). Datasets and checkpoints are
a single JSON header line followed by a little-endian float64 body whose
sha256 lives in the header and is verified on load; samples are CSV with a
JSON metadata sidecar. Exit codes: 0 ok, 2 config error, 3 numeric
divergence, 4 IO/integrity failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import oracles as orc
from . import samplers as smp
from . import score_net as sn
from . import training as tr
from .schedule import NoiseSchedule, make_schedule
from .score_net import NetworkConfig, ScoreNetwork
from .tasks import get_task
from .training import TrainingConfig, TrainingExample

DATASET_FORMAT = "npse-dataset"
CHECKPOINT_FORMAT = "npse-checkpoint"
FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

WORKERS_ENV = "NPSE_WORKERS"


class ConfigError(ValueError):
    pass


class IntegrityError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config parsing

def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def load_config(path: str | Path, schema: dict) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return validate_config(raw, schema, where=str(path))


def validate_config(raw: dict, schema: dict, where: str = "config") -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: top level must be an object")
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = {}
    for key, (kind, required, default) in schema.items():
        if key not in raw:
            if required:
                raise ConfigError(f"{where}: missing required key {key!r}")
            out[key] = default
            continue
        out[key] = _coerce(raw[key], kind, f"{where}.{key}")
    return out


def _coerce(value, kind, where):
    def fail():
        raise ConfigError(f"{where}: expected {kind}, got {value!r}")
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            fail()
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail()
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            fail()
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            fail()
        return value
    if kind == "dict":
        if not isinstance(value, dict):
            fail()
        return value
    if kind.startswith("list_"):
        if not isinstance(value, list):
            fail()
        inner = kind[5:]
        return [_coerce(v, inner, where) for v in value]
    raise AssertionError(f"bad schema kind {kind}")


# ---------------------------------------------------------------------------
# artifact formats

def _write_header_and_body(path: Path, header: dict, body: bytes) -> None:
    header = dict(header)
    header["body_sha256"] = _sha256_bytes(body)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_canonical_json(header).encode() + b"\n")
        f.write(body)


def _read_header_and_body(path: Path, expected_format: str) -> tuple[dict, bytes]:
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            body = f.read()
    except OSError as e:
        raise IntegrityError(f"cannot read {path}: {e}") from e
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"{path}: malformed header: {e}") from e
    if header.get("format") != expected_format:
        raise IntegrityError(f"{path}: expected format {expected_format!r}, "
                             f"got {header.get('format')!r}")
    if _sha256_bytes(body) != header.get("body_sha256"):
        raise IntegrityError(f"{path}: body checksum mismatch (tampered or truncated)")
    return header, body


def write_dataset(path: str | Path, task_name: str, cfg: TrainingConfig,
                  examples: list[TrainingExample], sim_calls: int) -> None:
    theta_dim = examples[0].theta.size
    x_dim = examples[0].xs.shape[1]
    parts = []
    for ex in examples:
        parts.append(ex.theta)
        parts.append(ex.xs.ravel())
    body = np.concatenate(parts).astype("<f8").tobytes()
    header = {
        "format": DATASET_FORMAT, "version": FORMAT_VERSION, "task": task_name,
        "m_max": cfg.m_max, "budget": cfg.budget, "seed": cfg.seed,
        "n_examples": len(examples), "theta_dim": theta_dim, "x_dim": x_dim,
        "set_sizes": [ex.n_set for ex in examples], "sim_calls": sim_calls,
    }
    _write_header_and_body(Path(path), header, body)


def read_dataset(path: str | Path) -> tuple[dict, list[TrainingExample]]:
    header, body = _read_header_and_body(Path(path), DATASET_FORMAT)
    flat = np.frombuffer(body, dtype="<f8").astype(float)
    td, xd = header["theta_dim"], header["x_dim"]
    examples = []
    off = 0
    for n in header["set_sizes"]:
        theta = flat[off:off + td]
        off += td
        xs = flat[off:off + n * xd].reshape(n, xd)
        off += n * xd
        examples.append(TrainingExample(n_set=n, theta=theta, xs=xs))
    if off != flat.size:
        raise IntegrityError(f"{path}: body length does not match set_sizes")
    return header, examples


def write_checkpoint(path: str | Path, net: ScoreNetwork, sch: NoiseSchedule,
                     train_meta: dict) -> None:
    header = {
        "format": CHECKPOINT_FORMAT, "version": FORMAT_VERSION,
        "net": asdict(net.config),
        "schedule": {"T": sch.T, "beta_min": sch.beta_min, "beta_max": sch.beta_max},
        "train": train_meta, "n_params": int(net.params.size),
    }
    _write_header_and_body(Path(path), header, net.params.astype("<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[ScoreNetwork, NoiseSchedule, dict]:
    header, body = _read_header_and_body(Path(path), CHECKPOINT_FORMAT)
    cfg = NetworkConfig(**header["net"])
    params = np.frombuffer(body, dtype="<f8").astype(float)
    if params.size != header["n_params"]:
        raise IntegrityError(f"{path}: parameter count mismatch")
    s = header["schedule"]
    sch = make_schedule(s["T"], s["beta_min"], s["beta_max"])
    return ScoreNetwork(config=cfg, params=params), sch, header["train"]


def write_samples(path: str | Path, samples: np.ndarray, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(samples), delimiter=",", fmt="%.17g")
    meta = dict(meta)
    meta["csv_sha256"] = _sha256_file(path)
    with open(path.with_suffix(path.suffix + ".meta.json"), "w") as f:
        f.write(_canonical_json(meta) + "\n")


def read_samples(path: str | Path, verify: bool = True) -> np.ndarray:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    if verify and meta_path.exists():
        with open(meta_path) as f:
            meta = json.load(f)
        if _sha256_file(path) != meta.get("csv_sha256"):
            raise IntegrityError(f"{path}: checksum mismatch against sidecar metadata")
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as e:
        raise IntegrityError(f"cannot read samples {path}: {e}") from e


def write_manifest(path: str | Path, command: str, config: dict,
                   inputs: dict[str, str], outputs: dict[str, str]) -> None:
    def entry(p):
        return {"path": str(p), "sha256": _sha256_file(p)}
    manifest = {
        "command": command,
        "config_sha256": _sha256_bytes(_canonical_json(config).encode()),
        "inputs": {k: entry(v) for k, v in inputs.items()},
        "outputs": {k: entry(v) for k, v in outputs.items()},
        "created_unix": time.time(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def verify_manifest(path: str | Path) -> bool:
    """True iff the manifest exists and every referenced file matches its checksum."""
    path = Path(path)
    if not path.exists():
        return False
    try:
        with open(path) as f:
            manifest = json.load(f)
        for section in ("inputs", "outputs"):
            for item in manifest.get(section, {}).values():
                if _sha256_file(item["path"]) != item["sha256"]:
                    return False
    except (OSError, json.JSONDecodeError, KeyError):
        return False
    return True


def append_results(path: str | Path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(_canonical_json(record) + "\n")


def read_results(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


# ---------------------------------------------------------------------------
# subcommands

SIMULATE_SCHEMA = {
    "task": ("str", True, None),
    "m_max": ("int", False, 1),
    "budget": ("int", True, None),
    "seed": ("int", False, 0),
    "out": ("str", True, None),
}


def cmd_simulate(config: dict) -> Path:
    cfg = validate_config(config, SIMULATE_SCHEMA)
    task = _get_task_checked(cfg["task"])
    tcfg = TrainingConfig(budget=cfg["budget"], m_max=cfg["m_max"], seed=cfg["seed"])
    calls = CallCounter(task)
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(5)[0])
    examples = tr.generate_dataset(calls.task, tcfg, rng)
    if not examples:
        raise ConfigError(f"budget {cfg['budget']} produced no complete examples")
    out = Path(cfg["out"])
    write_dataset(out, cfg["task"], tcfg, examples, calls.count)
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "simulate",
                   cfg, {}, {"dataset": out})
    return out


class CallCounter:
    """Counts true simulator invocations (one per observation drawn, plus one
    per rejected parameter) by wrapping the task's simulator hooks."""

    def __init__(self, task):
        self.count = 0
        self._invalid = 0
        outer = self

        def observe(curve, rng):
            outer.count += 1
            return task.observe(curve, rng)

        def trajectory_batch(Z):
            curves, valid = task.trajectory_batch(Z)
            outer.count += int(np.sum(~valid))
            return curves, valid

        self.task = replace(task, observe=observe, trajectory_batch=trajectory_batch)


def _get_task_checked(name: str):
    try:
        return get_task(name)
    except ValueError as e:
        raise ConfigError(str(e)) from e


TRAIN_SCHEMA = {
    "task": ("str", False, None),
    "m_max": ("int", False, None),
    "lr": ("float", False, None),
    "lr_grid": ("list_float", False, None),
    "batch_size": ("int", False, 256),
    "max_epochs": ("int", False, 20_000),
    "patience": ("int", False, 100),
    "val_fraction": ("float", False, 0.2),
    "seed": ("int", False, 0),
    "net": ("dict", False, None),
    "schedule": ("dict", False, None),
    "out": ("str", True, None),
}

NET_SCHEMA = {
    "hidden_dim": ("int", False, 64),
    "emb_dim": ("int", False, 32),
    "depth": ("int", False, 3),
    "time_emb_dim": ("int", False, 32),
    "noise_scaled_head": ("bool", False, True),
}

SCHEDULE_SCHEMA = {
    "T": ("int", False, 400),
    "beta_min": ("float", False, 1e-4),
    "beta_max": ("float", False, 0.04),
}


def _schedule_from(cfg: dict | None) -> NoiseSchedule:
    s = validate_config(cfg or {}, SCHEDULE_SCHEMA, "schedule")
    return make_schedule(s["T"], s["beta_min"], s["beta_max"])


def cmd_train(config: dict, dataset_path: str | Path) -> Path:
    cfg = validate_config(config, TRAIN_SCHEMA)
    header, dataset = read_dataset(dataset_path)
    if cfg["task"] is not None and cfg["task"] != header["task"]:
        raise ConfigError(f"config task {cfg['task']!r} but dataset holds "
                          f"{header['task']!r}")
    if cfg["m_max"] is not None and cfg["m_max"] != header["m_max"]:
        raise ConfigError(f"config m_max {cfg['m_max']} but dataset holds "
                          f"{header['m_max']}")
    sch = _schedule_from(cfg["schedule"])
    net_over = validate_config(cfg["net"] or {}, NET_SCHEMA, "net")
    net_cfg = NetworkConfig(theta_dim=header["theta_dim"], x_dim=header["x_dim"],
                            m_max=header["m_max"], **net_over)
    tcfg = TrainingConfig(budget=header["budget"], m_max=header["m_max"],
                          batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
                          patience=cfg["patience"], val_fraction=cfg["val_fraction"],
                          seed=cfg["seed"])
    if cfg["lr"] is not None and cfg["lr_grid"] is not None:
        raise ConfigError("give either lr or lr_grid, not both")
    if cfg["lr"] is not None:
        net, log = tr.train_on_dataset(dataset, replace(tcfg, lr=cfg["lr"]), sch,
                                       net_cfg=net_cfg)
        best_lr = cfg["lr"]
    else:
        lrs = tuple(cfg["lr_grid"] or tr.DEFAULT_LR_GRID)
        best = None
        for lr in lrs:
            net_i, log_i = tr.train_on_dataset(dataset, replace(tcfg, lr=lr), sch,
                                               net_cfg=net_cfg)
            val = min(rec["val_loss"] for rec in log_i)
            if best is None or val < best[0]:
                best = (val, net_i, log_i, lr)
        _, net, log, best_lr = best
    out = Path(cfg["out"])
    best_rec = min(log, key=lambda r: r["val_loss"])
    write_checkpoint(out, net, sch, {
        "task": header["task"], "budget": header["budget"], "seed": cfg["seed"],
        "lr": best_lr, "epochs_run": len(log), "best_epoch": best_rec["epoch"],
        "best_val_loss": best_rec["val_loss"],
    })
    log_path = out.with_suffix(out.suffix + ".log.jsonl")
    with open(log_path, "w") as f:
        for rec in log:
            f.write(_canonical_json(rec) + "\n")
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "train", cfg,
                   {"dataset": Path(dataset_path)},
                   {"checkpoint": out, "log": log_path})
    return out


SAMPLE_SCHEMA = {
    "kind": ("str", False, smp.ANNEALED_LANGEVIN),
    "L": ("int", False, 5),
    "step_scale": ("float", False, 0.3),
    "n_samples": ("int", True, None),
    "seed": ("int", False, 0),
    "out": ("str", True, None),
}


def cmd_sample(checkpoint_path: str | Path, observations_path: str | Path,
               config: dict) -> Path:
    cfg = validate_config(config, SAMPLE_SCHEMA)
    net, sch, meta = read_checkpoint(checkpoint_path)
    X = read_samples(observations_path)
    if X.shape[1] != net.config.x_dim:
        raise ConfigError(f"observations have dimension {X.shape[1]} but the "
                          f"checkpoint expects {net.config.x_dim}")
    scfg = smp.SamplerConfig(kind=cfg["kind"], L=cfg["L"],
                             step_scale=cfg["step_scale"],
                             n_samples=cfg["n_samples"], seed=cfg["seed"])
    samples = smp.sample_posterior(net, X, sch, scfg)
    out = Path(cfg["out"])
    write_samples(out, samples, {
        "task": meta.get("task"), "sampler": asdict(scfg),
        "checkpoint": str(checkpoint_path),
        "checkpoint_sha256": _sha256_file(checkpoint_path),
        "observations": str(observations_path),
        "observations_sha256": _sha256_file(observations_path),
        "n_obs": int(X.shape[0]), "oracle": False,
    })
    return out


ORACLE_SCHEMA = {
    "task": ("str", True, None),
    "method": ("str", False, "auto"),  # auto | conjugate | mixture | rwm
    "n_samples": ("int", True, None),
    "seed": ("int", False, 0),
    "rwm_steps": ("int", False, 200_000),
    "rwm_chains": ("int", False, 32),
    "out": ("str", True, None),
}


def oracle_samples(task_name: str, X: np.ndarray, method: str, n_samples: int,
                   seed: int, rwm_steps: int = 200_000, rwm_chains: int = 32
                   ) -> tuple[np.ndarray, dict]:
    task = _get_task_checked(task_name)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 77)))
    if method == "auto":
        if task_name == "gg":
            method = "conjugate"
        elif task_name in ("multimodal", "gmog") and X.shape[0] <= orc.MIXTURE_MAX_OBS:
            method = "mixture"
        else:
            method = "rwm"
    info = {"method": method}
    if method == "conjugate":
        if task_name != "gg":
            raise ConfigError("conjugate oracle applies to the gg task only")
        samples = orc.gg_posterior(X).sample(n_samples, rng)
    elif method == "mixture":
        samples = orc.mixture_posterior(task_name, X).sample(n_samples, rng)
    elif method == "rwm":
        res = orc.rwm_posterior(task, X, n_steps=rwm_steps, rng=rng,
                                n_chains=rwm_chains, max_kept=max(10_000, n_samples))
        info["acceptance_rate"] = res.acceptance_rate
        info["step_scale"] = res.step_scale
        pool = res.samples
        if pool.shape[0] < n_samples:
            raise ConfigError(f"rwm kept {pool.shape[0]} < requested {n_samples}; "
                              "raise rwm_steps")
        take = np.linspace(0, pool.shape[0] - 1, n_samples).round().astype(int)
        samples = pool[take]
    else:
        raise ConfigError(f"unknown oracle method {method!r}")
    return samples, info


def cmd_oracle(observations_path: str | Path, config: dict) -> Path:
    cfg = validate_config(config, ORACLE_SCHEMA)
    X = read_samples(observations_path)
    samples, info = oracle_samples(cfg["task"], X, cfg["method"], cfg["n_samples"],
                                   cfg["seed"], cfg["rwm_steps"], cfg["rwm_chains"])
    out = Path(cfg["out"])
    write_samples(out, samples, {
        "task": cfg["task"], "oracle": True, "oracle_info": info,
        "observations": str(observations_path),
        "observations_sha256": _sha256_file(observations_path),
        "n_obs": int(X.shape[0]), "seed": cfg["seed"],
    })
    return out


EVALUATE_SCHEMA = {
    "metrics": ("list_str", False, ["mmd2"]),
    "estimator": ("str", False, "unbiased"),
    "bandwidth_seed": ("int", False, 0),
    "split_seed": ("int", False, 0),
    "labels": ("dict", False, None),
    "out": ("str", True, None),
}


def cmd_evaluate(samples_a: str | Path, samples_b: str | Path,
                 config: dict) -> dict:
    cfg = validate_config(config, EVALUATE_SCHEMA)
    A = read_samples(samples_a)
    B = read_samples(samples_b)
    if A.shape[1] != B.shape[1]:
        raise ConfigError(f"sample dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    t0 = time.time()
    record = dict(cfg["labels"] or {})
    for metric in cfg["metrics"]:
        if metric == "mmd2":
            bw = ev.median_bandwidth(A, B, seed=cfg["bandwidth_seed"])
            rep = ev.mmd2(A, B, bw, estimator=cfg["estimator"])
            record["mmd2"] = rep.mmd2
            record["bandwidth"] = rep.bandwidth
            record["estimator"] = rep.estimator
        elif metric == "c2st":
            n = min(A.shape[0], B.shape[0])
            rep = ev.c2st(A[:n], B[:n], split_seed=cfg["split_seed"])
            record["c2st"] = rep.accuracy
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    record["n_a"] = int(A.shape[0])
    record["n_b"] = int(B.shape[0])
    record["wallclock"] = time.time() - t0
    append_results(cfg["out"], record)
    return record


# ---------------------------------------------------------------------------
# sweep

SWEEP_SCHEMA = {
    "task": ("str", True, None),
    "outdir": ("str", True, None),
    "methods": ("list_dict", False, None),
    "budgets": ("list_int", True, None),
    "seeds": ("list_int", True, None),
    "n_obs": ("list_int", True, None),
    "n_samples": ("int", False, 2000),
    "sampler": ("dict", False, None),
    "training": ("dict", False, None),
    "oracle": ("dict", False, None),
    "obs_seed": ("int", False, 123),
    "metrics": ("list_str", False, ["mmd2"]),
}

METHOD_SCHEMA = {
    "method": ("str", True, None),
    "m_max": ("int", False, None),
    "sampler_kind": ("str", False, None),
}

SWEEP_TRAINING_SCHEMA = {
    "batch_size": ("int", False, 256),
    "max_epochs": ("int", False, 20_000),
    "patience": ("int", False, 100),
    "val_fraction": ("float", False, 0.2),
    "lr": ("float", False, None),
    "lr_grid": ("list_float", False, None),
    "net": ("dict", False, None),
}

SWEEP_SAMPLER_SCHEMA = {
    "kind": ("str", False, None),
    "L": ("int", False, 5),
    "step_scale": ("float", False, 0.3),
}

SWEEP_ORACLE_SCHEMA = {
    "method": ("str", False, "auto"),
    "rwm_steps": ("int", False, 200_000),
    "rwm_chains": ("int", False, 32),
}


def _resolve_method(entry: dict, n_obs_max: int) -> tuple[str, int, str]:
    e = validate_config(entry, METHOD_SCHEMA, "method")
    name = e["method"]
    if name == "fnpse":
        m = 1
    elif name == "npse":
        m = n_obs_max
    elif name == "pfnpse":
        m = e["m_max"]
        if m is None or not 1 < m < n_obs_max:
            raise ConfigError(f"pfnpse needs 1 < m_max < {n_obs_max}, got {m}")
    else:
        raise ConfigError(f"unknown method {name!r}")
    if e["m_max"] is not None and e["m_max"] != m and name != "pfnpse":
        raise ConfigError(f"{name} fixes m_max={m}, config says {e['m_max']}")
    # the paper samples NPSE with the standard (k=1) ancestral reverse chain
    kind = e["sampler_kind"] or (smp.COMPOSED_ANCESTRAL if name == "npse"
                                 else smp.ANNEALED_LANGEVIN)
    return name, m, kind


def _sweep_observations(cfg: dict, outdir: Path, seed: int) -> Path:
    """Per-seed evaluation observation set from theta* ~ prior."""
    task = _get_task_checked(cfg["task"])
    n_max = max(cfg["n_obs"])
    path = outdir / "obs" / f"{cfg['task']}-s{seed}.csv"
    if path.exists():
        return path
    rng = np.random.default_rng(np.random.SeedSequence((cfg["obs_seed"], seed)))
    zstar = rng.standard_normal(task.theta_dim)
    xs = []
    while len(xs) < n_max:
        try:
            xs.append(task.simulate(zstar, rng))
        except Exception:
            zstar = rng.standard_normal(task.theta_dim)  # fresh draw, keep going
            xs = []
    write_samples(path, np.stack(xs), {"task": cfg["task"], "kind": "observations",
                                       "seed": seed, "theta_star": list(zstar)})
    return path


def _oracle_path(outdir: Path, task_name: str, seed: int, n_obs: int) -> Path:
    return outdir / "oracle" / f"{task_name}-s{seed}-n{n_obs}.csv"


def _run_group(cfg: dict, group: tuple) -> list[dict]:
    """One (method, budget, seed) group: simulate+train once, then one row per
    pending n_obs. Oracle and observation files must already exist."""
    method, m_max, sampler_kind, budget, seed, pending = group
    outdir = Path(cfg["outdir"])
    task_name = cfg["task"]
    gdir = outdir / "runs" / f"{task_name}-{method}{m_max}-b{budget}-s{seed}"
    gdir.mkdir(parents=True, exist_ok=True)
    dataset_path = gdir / "dataset.bin"
    ckpt_path = gdir / "checkpoint.bin"
    manifest_path = gdir / "manifest.json"

    tcfg_raw = validate_config(cfg["training"] or {}, SWEEP_TRAINING_SCHEMA,
                               "training")
    sampler_raw = validate_config(cfg["sampler"] or {}, SWEEP_SAMPLER_SCHEMA,
                                  "sampler")

    if not verify_manifest(manifest_path):
        sim_cfg = {"task": task_name, "m_max": m_max, "budget": budget,
                   "seed": seed, "out": str(dataset_path)}
        cmd_simulate(sim_cfg)
        train_cfg = {"out": str(ckpt_path), "seed": seed,
                     "batch_size": tcfg_raw["batch_size"],
                     "max_epochs": tcfg_raw["max_epochs"],
                     "patience": tcfg_raw["patience"],
                     "val_fraction": tcfg_raw["val_fraction"]}
        if tcfg_raw["lr"] is not None:
            train_cfg["lr"] = tcfg_raw["lr"]
        elif tcfg_raw["lr_grid"] is not None:
            train_cfg["lr_grid"] = tcfg_raw["lr_grid"]
        if tcfg_raw["net"] is not None:
            train_cfg["net"] = tcfg_raw["net"]
        cmd_train(train_cfg, dataset_path)
        write_manifest(manifest_path, "sweep-group",
                       {"task": task_name, "method": method, "m_max": m_max,
                        "budget": budget, "seed": seed},
                       {}, {"dataset": dataset_path, "checkpoint": ckpt_path})

    obs_path = Path(cfg["outdir"]) / "obs" / f"{task_name}-s{seed}.csv"
    X_all = read_samples(obs_path, verify=False)
    records = []
    for n_obs in pending:
        t0 = time.time()
        row = {"task": task_name, "method": method, "m": m_max, "n_obs": n_obs,
               "budget": budget, "seed": seed}
        try:
            kind = sampler_raw["kind"] or sampler_kind
            sample_path = gdir / f"samples-n{n_obs}.csv"
            obs_slice_path = gdir / f"obs-n{n_obs}.csv"
            write_samples(obs_slice_path, X_all[:n_obs],
                          {"task": task_name, "kind": "observations",
                           "seed": seed, "n_obs": n_obs})
            cmd_sample(ckpt_path, obs_slice_path,
                       {"kind": kind, "L": sampler_raw["L"],
                        "step_scale": sampler_raw["step_scale"],
                        "n_samples": cfg["n_samples"], "seed": seed,
                        "out": str(sample_path)})
            A = read_samples(sample_path)
            B = read_samples(_oracle_path(outdir, task_name, seed, n_obs))
            bw = ev.median_bandwidth(A, B)
            row["mmd2"] = ev.mmd2(A, B, bw).mmd2
            if "c2st" in cfg["metrics"]:
                n = min(A.shape[0], B.shape[0])
                row["c2st"] = ev.c2st(A[:n], B[:n], split_seed=seed).accuracy
            row["status"] = "ok"
        except Exception as e:  # partial failure: mark the row, keep sweeping
            row["status"] = "failed"
            row["error"] = f"{type(e).__name__}: {e}"
        row["wallclock"] = time.time() - t0
        records.append(row)
    return records


def _row_key(r: dict) -> tuple:
    return (r.get("task"), r.get("method"), r.get("m"), r.get("budget"),
            r.get("seed"), r.get("n_obs"))


def cmd_sweep(config: dict) -> list[dict]:
    cfg = validate_config(config, SWEEP_SCHEMA)
    if not cfg["methods"]:
        raise ConfigError("sweep needs at least one method entry")
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    results_path = outdir / "results.jsonl"
    done = {_row_key(r) for r in read_results(results_path) if r.get("status") == "ok"}

    n_obs_max = max(cfg["n_obs"])
    groups = []
    for entry in cfg["methods"]:
        method, m_max, kind = _resolve_method(entry, n_obs_max)
        for budget in cfg["budgets"]:
            for seed in cfg["seeds"]:
                pending = tuple(
                    n for n in cfg["n_obs"]
                    if (cfg["task"], method, m_max, budget, seed, n) not in done)
                if pending:
                    groups.append((method, m_max, kind, budget, seed, pending))

    # shared artifacts first (single writer): observation sets and oracles
    oracle_raw = validate_config(cfg["oracle"] or {}, SWEEP_ORACLE_SCHEMA, "oracle")
    needed = {(g[4], n) for g in groups for n in g[5]}
    for seed in sorted({s for s, _ in needed}):
        obs_path = _sweep_observations(cfg, outdir, seed)
        X_all = read_samples(obs_path, verify=False)
        for n_obs in sorted({n for s, n in needed if s == seed}):
            opath = _oracle_path(outdir, cfg["task"], seed, n_obs)
            if opath.exists():
                continue
            obs_slice = opath.with_suffix(".obs.csv")
            write_samples(obs_slice, X_all[:n_obs],
                          {"task": cfg["task"], "kind": "observations",
                           "seed": seed, "n_obs": n_obs})
            cmd_oracle(obs_slice, {"task": cfg["task"],
                                   "method": oracle_raw["method"],
                                   "n_samples": cfg["n_samples"],
                                   "seed": cfg["obs_seed"],
                                   "rwm_steps": oracle_raw["rwm_steps"],
                                   "rwm_chains": oracle_raw["rwm_chains"],
                                   "out": str(opath)})

    workers = max(1, int(os.environ.get(WORKERS_ENV, "1")))
    all_rows: list[dict] = []
    if workers == 1 or len(groups) <= 1:
        for g in groups:
            all_rows.extend(_run_group(cfg, g))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(_run_group, [cfg] * len(groups), groups):
                all_rows.extend(rows)
    # single-writer append of the results file
    for row in all_rows:
        if _row_key(row) not in done:
            append_results(results_path, row)
    return read_results(results_path)


def cmd_report(results_path: str | Path, outdir: str | Path) -> list[Path]:
    """Per-figure CSVs: mmd2 vs budget, and mmd2 vs m."""
    rows = [r for r in read_results(results_path) if r.get("status") == "ok"]
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    def aggregate(keyfields, xfield):
        agg: dict[tuple, list[float]] = {}
        for r in rows:
            if "mmd2" not in r:
                continue
            key = tuple(r.get(f) for f in keyfields) + (r.get(xfield),)
            agg.setdefault(key, []).append(r["mmd2"])
        return agg

    written = []
    budget_csv = outdir / "mmd2_vs_budget.csv"
    with open(budget_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "method", "m", "n_obs", "budget", "mean_mmd2",
                    "stderr_mmd2", "n_seeds"])
        agg = aggregate(("task", "method", "m", "n_obs"), "budget")
        for key in sorted(agg, key=str):
            vals = np.array(agg[key])
            w.writerow(list(key) + [vals.mean(),
                                    vals.std(ddof=1) / np.sqrt(len(vals))
                                    if len(vals) > 1 else 0.0, len(vals)])
    written.append(budget_csv)

    m_csv = outdir / "mmd2_vs_m.csv"
    with open(m_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "budget", "n_obs", "m", "mean_mmd2", "stderr_mmd2",
                    "n_seeds"])
        agg = aggregate(("task", "budget", "n_obs"), "m")
        for key in sorted(agg, key=str):
            vals = np.array(agg[key])
            w.writerow(list(key) + [vals.mean(),
                                    vals.std(ddof=1) / np.sqrt(len(vals))
                                    if len(vals) > 1 else 0.0, len(vals)])
    written.append(m_csv)
    return written


# ---------------------------------------------------------------------------
# entry point

def _load_json_arg(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="npse",
                                description="Compositional score modeling for "
                                            "simulation-based inference")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, *positional, help=None, seed=True):
        sp = sub.add_parser(name, help=help)
        for arg in positional:
            sp.add_argument(arg)
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help="override the config seed")
        return sp

    add("simulate", "config", help="generate a training dataset")
    add("train", "config", "dataset", help="train a score network on a dataset")
    add("sample", "checkpoint", "observations", "config",
        help="sample a posterior with a checkpoint")
    add("oracle", "observations", "config", help="reference posterior samples")
    add("evaluate", "samples_a", "samples_b", "config",
        help="MMD^2 / C2ST between two sample files")
    add("sweep", "config", help="run a method x budget x seed x n_obs grid")
    add("report", "results", "outdir", seed=False,
        help="emit per-figure CSVs from results")

    args = p.parse_args(argv)

    def seeded(cfg, key="seed"):
        if getattr(args, "seed", None) is not None:
            cfg = {**cfg, key: args.seed}
        return cfg

    try:
        if args.command == "simulate":
            out = cmd_simulate(seeded(_load_json_arg(args.config)))
            print(out)
        elif args.command == "train":
            out = cmd_train(seeded(_load_json_arg(args.config)), args.dataset)
            print(out)
        elif args.command == "sample":
            out = cmd_sample(args.checkpoint, args.observations,
                             seeded(_load_json_arg(args.config)))
            print(out)
        elif args.command == "oracle":
            out = cmd_oracle(args.observations, seeded(_load_json_arg(args.config)))
            print(out)
        elif args.command == "evaluate":
            rec = cmd_evaluate(args.samples_a, args.samples_b,
                               seeded(_load_json_arg(args.config), "split_seed"))
            print(_canonical_json(rec))
        elif args.command == "sweep":
            cfg = _load_json_arg(args.config)
            if args.seed is not None:
                cfg = {**cfg, "seeds": [args.seed]}
            rows = cmd_sweep(cfg)
            ok = sum(1 for r in rows if r.get("status") == "ok")
            print(f"{ok}/{len(rows)} rows ok")
        elif args.command == "report":
            for path in cmd_report(args.results, args.outdir):
                print(path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (smp.SamplerDivergedError, orc.StepScaleError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IntegrityError, OSError) as e:
        print(f"io/integrity failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
