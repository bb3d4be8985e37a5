"""Experiment configs, scenario presets and the sweep runner."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from . import __version__
from .analysis import lp_lower_bound
from .flowsim import simulate
from .metrics import PERCENTILE_METHOD, report
from .scheduling import POLICY_KINDS, SchedulingError, make_policy, messages
from .topology import TopologyError, format_rate, topology_from_config
from .workload import (
    FAMILIES, WorkloadError, WorkloadSpec, aggregate, generate, synthetic_mixtral_trace,
    write_trace,
)

SCHEMA_VERSION = 1
OUTPUT_ENV = "RAILSIM_OUTPUT_DIR"

CSV_COLUMNS = (
    "preset", "policy", "seed", "phase", "M", "N", "chunk_bytes", "qps", "topo_hash",
    "cct_avg", "cct_p80", "cct_p95", "cct_p99", "cct_total", "msg_cct_avg", "msg_cct_p99",
    "busbw", "busbw_norm", "sender_mse", "receiver_mse", "sender_mse_max", "receiver_mse_max",
    "sender_mse_hot", "receiver_mse_hot", "iter_time", "t_star", "sim_over_opt",
)

DEFAULT_POLICIES = ["rails_lpt", "ecmp", "minrtt", "plb", "reps"]

# Fixed compute time per iteration for the Mixtral-style presets. It puts the
# ECMP all-to-all share of the dense iteration near the middle of the 40-60%
# range reported for MoE training (see the manifest for the measured share).
MIXTRAL_COMPUTE_TIME = 6e-3

_TOPOLOGY_DEFAULTS = {
    "M": 8, "N": 8, "R2": "100G", "R1": None, "spine_count": None,
    "leaf_spine_capacity": None, "oversubscription": 1.0,
}
_WORKLOAD_DEFAULTS = {
    "family": "uniform", "total_bytes_per_sender": 16_000_000, "K": 2, "sparsity": 0.0,
    "zipf_exponent": 1.2, "seed": None, "hot_gpus": 1, "trace_path": None, "trace_mode": None,
    "gating_concentration": 4.0,
}
_TOP_DEFAULTS = {
    "schema_version": SCHEMA_VERSION, "preset": "custom", "policies": DEFAULT_POLICIES,
    "policy_params": {}, "chunk_bytes": 32768, "qps_per_rail": 64, "seeds": [0],
    "reference_policy": "ecmp", "output": None, "compute_time": None,
    "return_all_to_all": "mirror", "workers": 1,
}

PRESETS: dict[str, dict] = {
    "uniform": {"workload": {"family": "uniform"}},
    "sparse-0.6": {"workload": {"family": "sparse_topk", "sparsity": 0.6, "K": 2}},
    "sparse-0.4": {"workload": {"family": "sparse_topk", "sparsity": 0.4, "K": 2}},
    "sparse-0.2": {"workload": {"family": "sparse_topk", "sparsity": 0.2, "K": 2}},
    "sparse-0": {"workload": {"family": "sparse_topk", "sparsity": 0.0, "K": 2}},
    "sender_skewed": {"workload": {"family": "sender_skewed"}},
    "receiver_skewed": {"workload": {"family": "receiver_skewed"}},
    "mixtral_dense": {
        "workload": {"family": "trace", "trace_path": "mixtral_dense.trace.jsonl", "seed": 0},
        "compute_time": MIXTRAL_COMPUTE_TIME, "return_all_to_all": "simulate",
        "_trace_mode": "dense",
    },
    "mixtral_sparse": {
        "workload": {"family": "trace", "trace_path": "mixtral_sparse.trace.jsonl", "seed": 0},
        "compute_time": MIXTRAL_COMPUTE_TIME, "return_all_to_all": "simulate",
        "_trace_mode": "sparse",
    },
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class ExperimentConfig:
    """A resolved, validated experiment description."""

    data: dict
    base_dir: Path

    @property
    def preset(self) -> str:
        return self.data["preset"]

    def output_path(self) -> Path:
        out = self.data["output"] or f"{self.preset}.csv"
        path = Path(out)
        override = os.environ.get(OUTPUT_ENV)
        if override:
            return Path(override) / path.name
        return path if path.is_absolute() else self.base_dir / path

    def workload_spec(self, seed: int) -> WorkloadSpec:
        w = dict(self.data["workload"])
        pinned = w.pop("seed")
        return WorkloadSpec(seed=seed if pinned is None else pinned, **w)


# ------------------------------------------------------------------ configs

def preset_config(name: str, out_dir: Optional[Path] = None) -> dict:
    """Ready-made config for a named scenario.

    Trace presets also write their synthetic trace file into ``out_dir``.
    """
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}; choose from {sorted(PRESETS)}"])
    p = copy.deepcopy(PRESETS[name])
    mode = p.pop("_trace_mode", None)
    cfg = copy.deepcopy(_TOP_DEFAULTS)
    cfg["topology"] = dict(_TOPOLOGY_DEFAULTS)
    cfg["workload"] = dict(_WORKLOAD_DEFAULTS)
    cfg["workload"].update(p.pop("workload"))
    cfg.update(p)
    cfg["preset"] = name
    cfg["output"] = f"{name}.csv"
    if mode is not None and out_dir is not None:
        t = cfg["topology"]
        phases = synthetic_mixtral_trace(t["M"], t["N"], mode, seed=cfg["workload"]["seed"])
        write_trace(Path(out_dir) / cfg["workload"]["trace_path"], phases)
    return cfg


def write_preset(name: str, out: Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = preset_config(name, out.parent)
    out.write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    return out


def _load_json(path: Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read ({exc.strerror})"]) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None


def _merge(defaults: dict, given: Any, where: str, problems: list[str]) -> dict:
    if not isinstance(given, dict):
        problems.append(f"{where}: expected an object")
        return dict(defaults)
    for key in given:
        if key not in defaults:
            problems.append(f"{where}.{key}: unknown field")
    out = dict(defaults)
    out.update({k: v for k, v in given.items() if k in defaults})
    return out


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def resolve_config(raw: Any, base_dir: Path) -> ExperimentConfig:
    """Fill defaults and check every field, collecting all problems."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected an object"])
    top_defaults = dict(_TOP_DEFAULTS, topology=None, workload=None)
    cfg = _merge(top_defaults, raw, "config", problems)
    if "topology" not in raw:
        problems.append("topology: missing section")
    if "workload" not in raw:
        problems.append("workload: missing section")
    topo_raw = raw.get("topology", {})
    if isinstance(topo_raw, dict):
        for key in ("M", "N", "R2"):
            if key not in topo_raw:
                problems.append(f"topology.{key}: required field missing")
    cfg["topology"] = _merge(_TOPOLOGY_DEFAULTS, topo_raw, "topology", problems)
    cfg["workload"] = _merge(_WORKLOAD_DEFAULTS, raw.get("workload", {}), "workload", problems)

    if cfg["schema_version"] != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {cfg['schema_version']!r}")
    t = cfg["topology"]
    for key in ("M", "N"):
        if not _is_int(t[key]):
            problems.append(f"topology.{key}: expected an integer, got {t[key]!r}")
    if not problems:
        try:
            topology_from_config(t)
        except TopologyError as exc:
            problems.append(f"topology: {exc}")

    w = cfg["workload"]
    if w["family"] not in FAMILIES:
        problems.append(f"workload.family: unknown family {w['family']!r}; choose from {list(FAMILIES)}")
    else:
        try:
            WorkloadSpec(**{k: v for k, v in w.items() if k != "seed"})
        except (WorkloadError, TypeError) as exc:
            problems.append(f"workload: {exc}")
    if w["seed"] is not None and not _is_int(w["seed"]):
        problems.append("workload.seed: expected an integer or null")
    if w["trace_path"] and not (base_dir / w["trace_path"]).exists():
        problems.append(f"workload.trace_path: file {w['trace_path']!r} not found")

    pols = cfg["policies"]
    if not isinstance(pols, list) or not pols:
        problems.append("policies: need a non-empty list")
        pols = []
    for i, p in enumerate(pols):
        if p not in POLICY_KINDS:
            problems.append(f"policies[{i}]: unknown policy {p!r}; choose from {list(POLICY_KINDS)}")
    if len(set(pols)) != len(pols):
        problems.append("policies: duplicates")
    if cfg["reference_policy"] not in pols:
        problems.append(f"reference_policy: {cfg['reference_policy']!r} is not in policies")
    seeds = cfg["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(_is_int(s) for s in seeds):
        problems.append("seeds: need a non-empty list of integers")
    elif len(set(seeds)) != len(seeds):
        problems.append("seeds: duplicates")
    for key in ("chunk_bytes", "qps_per_rail", "workers"):
        if not _is_int(cfg[key]) or cfg[key] < 1:
            problems.append(f"{key}: expected an integer >= 1")
    ct = cfg["compute_time"]
    if ct is not None and (not isinstance(ct, (int, float)) or isinstance(ct, bool) or ct < 0):
        problems.append("compute_time: expected a non-negative number or null")
    if cfg["return_all_to_all"] not in ("mirror", "simulate"):
        problems.append("return_all_to_all: expected 'mirror' or 'simulate'")
    params = cfg["policy_params"]
    if not isinstance(params, dict):
        problems.append("policy_params: expected an object")
    else:
        for name, knobs in params.items():
            if name not in POLICY_KINDS:
                problems.append(f"policy_params.{name}: unknown policy")
                continue
            try:
                make_policy(name, chunk_bytes=1, **(knobs or {}))
            except (SchedulingError, TypeError) as exc:
                problems.append(f"policy_params.{name}: {exc}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(cfg, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return resolve_config(_load_json(path), path.parent.resolve())


def validate_config(path) -> dict:
    """Validate without running; returns the resolved config plus effective rates."""
    cfg = load_config(path)
    topo = topology_from_config(cfg.data["topology"])
    out = copy.deepcopy(cfg.data)
    out["effective_topology"] = {
        "R1": format_rate(topo.R1), "R2": format_rate(topo.R2),
        "spine_count": topo.spine_count,
        "leaf_spine_capacity": format_rate(topo.leaf_spine_capacity),
        "fingerprint": topo.fingerprint(),
    }
    out["output_path"] = str(cfg.output_path())
    return out


# ------------------------------------------------------------------- runner

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def _run_one(cfg: ExperimentConfig, policy_name: str, seed: int) -> list[dict]:
    d = cfg.data
    topo = topology_from_config(d["topology"])
    spec = cfg.workload_spec(seed)
    phases = generate(spec, topo.M, topo.N, base_dir=cfg.base_dir)
    knobs = dict(d["policy_params"].get(policy_name) or {})
    policy = make_policy(
        policy_name, chunk_bytes=d["chunk_bytes"], qps_per_rail=d["qps_per_rail"], seed=seed, **knobs
    )
    rows = []
    for index, (label, d1) in enumerate(phases):
        msgs = messages(d1)
        if not msgs:
            continue
        res = simulate(topo, msgs, policy, seed)
        second = None
        if d["compute_time"] is not None and d["return_all_to_all"] == "simulate":
            second = simulate(topo, messages(d1.transpose()), policy, seed)
        rep = report(res, second=second, compute_time=d["compute_time"])
        t_star, _ = lp_lower_bound(aggregate(d1), topo.N, topo.R2)
        rows.append({
            "_phase_index": index,
            "_repaths": res.meta.get("repaths"),
            "_repath_threshold": res.meta.get("repath_threshold"),
            "preset": d["preset"], "policy": policy_name, "seed": seed, "phase": label,
            "M": topo.M, "N": topo.N, "chunk_bytes": d["chunk_bytes"], "qps": d["qps_per_rail"],
            "topo_hash": topo.fingerprint(),
            "cct_avg": rep.cct_avg, "cct_p80": rep.cct_p80, "cct_p95": rep.cct_p95,
            "cct_p99": rep.cct_p99, "cct_total": rep.cct_total,
            "msg_cct_avg": rep.msg_cct_avg, "msg_cct_p99": rep.msg_cct_p99,
            "busbw": rep.busbw, "busbw_norm": None,
            "sender_mse": rep.sender_mse_mean, "receiver_mse": rep.receiver_mse_mean,
            "sender_mse_max": rep.sender_mse_max, "receiver_mse_max": rep.receiver_mse_max,
            "sender_mse_hot": rep.sender_mse_hot, "receiver_mse_hot": rep.receiver_mse_hot,
            "iter_time": rep.iteration_time, "t_star": t_star,
            "sim_over_opt": rep.cct_total / t_star,
        })
    return rows


def _task(args):
    cfg, policy_name, seed = args
    return _run_one(cfg, policy_name, seed)


def run_rows(cfg: ExperimentConfig, workers: Optional[int] = None) -> list[dict]:
    """All result rows, sorted by (preset, policy, seed, phase order)."""
    d = cfg.data
    tasks = [(cfg, p, s) for p in d["policies"] for s in d["seeds"]]
    workers = d["workers"] if workers is None else workers
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_task, tasks))
    else:
        chunks = [_task(t) for t in tasks]
    rows = [r for chunk in chunks for r in chunk]
    ref = {
        (r["seed"], r["_phase_index"]): r["busbw"]
        for r in rows if r["policy"] == d["reference_policy"]
    }
    for r in rows:
        r["busbw_norm"] = r["busbw"] / ref[(r["seed"], r["_phase_index"])]
    rows.sort(key=lambda r: (r["preset"], r["policy"], r["seed"], r["_phase_index"]))
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _versions() -> dict:
    import numba
    import numpy
    import scipy

    return {"railsim": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__}


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> dict:
    """Run the sweep, write the CSV and a manifest next to it, return a summary."""
    rows = run_rows(cfg, workers)
    text = rows_to_csv(rows)
    out = cfg.output_path()
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    digest = hashlib.sha256(text.encode()).hexdigest()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "csv": out.name,
        "csv_sha256": digest,
        "rows": len(rows),
        "config": cfg.data,
        "versions": _versions(),
        "percentile_method": PERCENTILE_METHOD,
        "busbw": "inter-domain payload bytes / cct_total; busbw_norm relative to reference_policy",
        "iteration_model": "compute_time + cct(first all-to-all) + cct(return all-to-all), no overlap",
        "sim_over_opt": "cct_total / t_star, t_star = max(row sum, column sum) / (N * R2)",
    }
    ecmp = [r for r in rows if r["policy"] == "ecmp" and r["iter_time"]]
    if ecmp:
        share = [(r["iter_time"] - cfg.data["compute_time"]) / r["iter_time"] for r in ecmp]
        manifest["ecmp_all_to_all_share"] = sum(share) / len(share)
    plb = [r for r in rows if r["_repaths"] is not None]
    if plb:
        manifest["plb"] = {
            "repath_threshold": plb[0]["_repath_threshold"],
            "repaths": [{"seed": r["seed"], "phase": r["phase"], "repaths": r["_repaths"]} for r in plb],
        }
    man_path = out.with_suffix(".manifest.json")
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"csv": str(out), "manifest": str(man_path), "rows": len(rows), "sha256": digest}
