"""Scenario configs, seeded replication and parameter sweeps.

Configs are JSON.  A scenario config looks like::

    {
      "formation": {"kind": "hex_grid", "rows": 10, "cols": 10, "spacing": 10},
      "protocol": {"tsr": 0.95, "ct": 7, "gm": 3, "st": 5, "dss": "u"},
      "channel": {"interference_margin": 6},
      "seed": 1,
      "stop": "convergence"
    }

and an experiment (sweep) config wraps one as ``"scenario"`` next to a
``"grid"`` of values to cross, ``"reps"`` and ``"base_seed"``.  Unknown keys
anywhere are rejected.
"""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import channel as ch
from . import protocol as pc
from .engine import (COLLISION, EVALUATION_MODES, MGMT_MODELS, RunResult, Scenario,
                     ScenarioError, StopCondition, run)
from .topology import Formation, gen_hex_grid, gen_hex_rings, gen_single_hop

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "run_id", "seed", "u", "tsr", "ct", "gm", "st", "dss", "fst",
    "resolution_slots", "resolution_rounds", "convergence_slots", "convergence_rounds",
    "final_superframe", "reuse", "control_packets", "overhead_normalized",
    "removed_slots", "valid", "stalled",
]
SUMMARY_METRICS = [
    "resolution_rounds", "convergence_rounds", "final_superframe", "reuse",
    "control_packets", "overhead_normalized", "removed_slots",
]
GRID_KEYS = ("u", "rows_cols", "rings", "tsr", "ct", "gm", "st", "dss", "fst")

_FORMATION_KEYS = {
    "hex_grid": {"rows", "cols", "spacing", "safety_radius"},
    "hex_rings": {"rings", "spacing", "safety_radius"},
    "single_hop": {"u", "safety_radius"},
    "positions": {"path", "safety_radius"},
}
_PROTOCOL_KEYS = set(pc.ProtocolParams.__dataclass_fields__)
_CHANNEL_KEYS = set(ch.ChannelParams.__dataclass_fields__) | {"interference_margin"}
_SCENARIO_KEYS = {"formation", "protocol", "channel", "seed", "stop", "max_slots",
                  "mgmt_model", "evaluation", "join_schedule", "leave_schedule"}
_EXPERIMENT_KEYS = {"scenario", "grid", "reps", "base_seed", "out", "summary"}


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending field."""


class ExperimentError(RuntimeError):
    """A run inside an experiment produced an invalid allocation."""


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def _read_positions(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return np.array([[float(r["x"]), float(r["y"]), float(r.get("z") or 0.0)] for r in rows])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: bad positions CSV ({exc})") from None


def build_formation(cfg: dict, where: str = "formation") -> Formation:
    kind = cfg.get("kind") if isinstance(cfg, dict) else None
    if kind not in _FORMATION_KEYS:
        raise ConfigError(f"{where}.kind: expected one of {sorted(_FORMATION_KEYS)}, got {kind!r}")
    _check_keys(cfg, _FORMATION_KEYS[kind] | {"kind"}, where)
    try:
        if kind == "hex_grid":
            return gen_hex_grid(int(cfg["rows"]), int(cfg["cols"]), float(cfg.get("spacing", 10.0)),
                                cfg.get("safety_radius"))
        if kind == "hex_rings":
            return gen_hex_rings(int(cfg["rings"]), float(cfg.get("spacing", 10.0)),
                                 cfg.get("safety_radius"))
        if kind == "single_hop":
            return gen_single_hop(int(cfg["u"]), float(cfg.get("safety_radius", 10.0)))
        return Formation(_read_positions(cfg["path"]), float(cfg.get("safety_radius", 10.0)))
    except KeyError as exc:
        raise ConfigError(f"{where}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build_scenario(cfg: dict, seed: Optional[int] = None, stop=None,
                   mgmt_model: Optional[str] = None, trace: bool = False) -> Scenario:
    """Turn a scenario config into a :class:`Scenario`; CLI overrides win."""
    _check_keys(cfg, _SCENARIO_KEYS, "scenario")
    if "formation" not in cfg:
        raise ConfigError("scenario: missing key 'formation'")
    formation = build_formation(cfg["formation"])

    chan = dict(cfg.get("channel", {}))
    _check_keys(chan, _CHANNEL_KEYS, "channel")
    margin = float(chan.pop("interference_margin", ch.DEFAULT_INTERFERENCE_MARGIN_DB))
    proto = dict(cfg.get("protocol", {}))
    _check_keys(proto, _PROTOCOL_KEYS, "protocol")
    if proto.get("dss") == "u":
        proto["dss"] = formation.size

    model = mgmt_model or cfg.get("mgmt_model", COLLISION)
    if model not in MGMT_MODELS:
        raise ConfigError(f"mgmt_model: expected one of {sorted(MGMT_MODELS)}, got {model!r}")
    evaluation = cfg.get("evaluation", EVALUATION_MODES[0])
    if evaluation not in EVALUATION_MODES:
        raise ConfigError(f"evaluation: expected one of {list(EVALUATION_MODES)}, got {evaluation!r}")
    try:
        channel = ch.ChannelParams(**chan)
        kwargs: Dict[str, Any] = dict(proto)
        kwargs.update(
            seed=int(cfg.get("seed", 0) if seed is None else seed),
            stop=StopCondition.parse(stop if stop is not None else cfg.get("stop", "convergence")),
            max_slots=int(cfg.get("max_slots", 10_000_000)),
            mgmt_model=model,
            evaluation=evaluation,
            trace=trace,
        )
        if "join_schedule" in cfg:
            kwargs["join_schedule"] = {int(k): int(v) for k, v in cfg["join_schedule"].items()}
        if "leave_schedule" in cfg:
            kwargs["leave_schedule"] = {int(k): int(v) for k, v in cfg["leave_schedule"].items()}
        sc = Scenario.build(formation, channel, margin=margin, **kwargs)
        sc.joins()
        return sc
    except ConfigError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"scenario: {exc}") from None


# ---------------------------------------------------------------- experiments

@dataclass
class ExperimentSpec:
    scenario: dict
    grid: Dict[str, list] = field(default_factory=dict)
    reps: int = 1
    base_seed: int = 0
    out: Optional[str] = None
    summary: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.reps, bool) or not isinstance(self.reps, int) or self.reps < 1:
            raise ConfigError(f"reps: must be a positive integer, got {self.reps!r}")
        _check_keys(self.grid, GRID_KEYS, "grid")
        for key, values in self.grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid.{key}: expected a non-empty list")

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentSpec":
        _check_keys(cfg, _EXPERIMENT_KEYS, "experiment")
        if "scenario" not in cfg:
            raise ConfigError("experiment: missing key 'scenario'")
        if "grid" in cfg and not cfg["grid"]:
            raise ConfigError("grid: empty grid (omit the key for a single cell)")
        return cls(scenario=cfg["scenario"], grid=cfg.get("grid", {}), reps=cfg.get("reps", 1),
                   base_seed=int(cfg.get("base_seed", 0)), out=cfg.get("out"),
                   summary=cfg.get("summary"))

    def cells(self) -> List[dict]:
        keys = [k for k in GRID_KEYS if k in self.grid]
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grid[k] for k in keys))]

    def cell_config(self, cell: dict) -> dict:
        cfg = copy.deepcopy(self.scenario)
        form = cfg.setdefault("formation", {})
        proto = cfg.setdefault("protocol", {})
        for key, value in cell.items():
            if key == "u":
                if form.get("kind") != "single_hop":
                    raise ConfigError("grid.u: only valid for single_hop formations")
                form["u"] = value
            elif key == "rows_cols":
                if form.get("kind") != "hex_grid":
                    raise ConfigError("grid.rows_cols: only valid for hex_grid formations")
                form["rows"], form["cols"] = value
            elif key == "rings":
                if form.get("kind") != "hex_rings":
                    raise ConfigError("grid.rings: only valid for hex_rings formations")
                form["rings"] = value
            else:
                proto[key] = value
        return cfg


def derive_seed(base_seed: int, cell: int, rep: int) -> int:
    return int(np.random.SeedSequence(base_seed, spawn_key=(cell, rep)).generate_state(1)[0])


def result_row(run_id: int, sc: Scenario, r: RunResult) -> dict:
    p = sc.protocol
    return {
        "run_id": run_id, "seed": sc.seed, "u": r.u, "tsr": p.tsr, "ct": p.ct, "gm": p.gm,
        "st": p.st, "dss": p.dss, "fst": p.fst,
        "resolution_slots": r.resolution_slot, "resolution_rounds": r.resolution_rounds,
        "convergence_slots": r.convergence_slot, "convergence_rounds": r.convergence_rounds,
        "final_superframe": r.final_superframe, "reuse": r.reuse,
        "control_packets": r.control_packets, "overhead_normalized": r.overhead_normalized,
        "removed_slots": r.removed_slots, "valid": r.valid,
        "stalled": r.stalled,
    }


def summarize(values: Sequence[float]) -> dict:
    """Table-style statistics; std/var use the sample (n-1) estimator."""
    x = np.array([v for v in values if v is not None], dtype=float)
    if len(x) == 0:
        return {"n": 0}
    ddof = 1 if len(x) > 1 else 0
    q25, q50, q75 = np.percentile(x, [25, 50, 75])
    return {
        "n": int(len(x)), "mean": float(x.mean()), "std": float(x.std(ddof=ddof)),
        "var": float(x.var(ddof=ddof)), "min": float(x.min()), "max": float(x.max()),
        "q25": float(q25), "median": float(q50), "q75": float(q75),
    }


def _run_job(job):
    run_id, cfg, seed = job
    sc = build_scenario(cfg, seed=seed)
    return run_id, result_row(run_id, sc, run(sc))


@dataclass
class ExperimentResult:
    rows: List[dict]
    summary: List[dict]

    @property
    def all_converged(self) -> bool:
        return all(r["convergence_slots"] is not None for r in self.rows)


def run_experiment(spec: ExperimentSpec, jobs: int = 1, out: Optional[str] = None,
                   summary_path: Optional[str] = None) -> ExperimentResult:
    cells = spec.cells()
    plan = []
    for ci, cell in enumerate(cells):
        cfg = spec.cell_config(cell)
        build_scenario(cfg)  # fail fast on a bad cell before anything runs
        for rep in range(spec.reps):
            plan.append((len(plan), cfg, derive_seed(spec.base_seed, ci, rep)))

    rows: List[dict] = []
    if jobs > 1:
        with Pool(jobs) as pool:
            done = pool.imap(_run_job, plan)
            rows = _collect(done)
    else:
        rows = _collect(map(_run_job, plan))

    summary = []
    for ci, cell in enumerate(cells):
        cell_rows = rows[ci * spec.reps:(ci + 1) * spec.reps]
        summary.append({
            "cell": ci, "params": cell,
            "metrics": {m: summarize([r[m] for r in cell_rows]) for m in SUMMARY_METRICS},
        })
    out = out or spec.out
    summary_path = summary_path or spec.summary
    if out:
        write_csv(rows, out)
        if summary_path is None:
            summary_path = os.path.splitext(out)[0] + ".summary.json"
    if summary_path:
        with open(summary_path, "w") as fh:
            json.dump(summary, fh, indent=2)
    return ExperimentResult(rows, summary)


def _collect(done) -> List[dict]:
    rows = []
    for run_id, row in done:
        if not row["valid"] and row["convergence_slots"] is not None:
            raise ExperimentError(
                f"run {run_id} (seed {row['seed']}) converged to an invalid allocation")
        rows.append(row)
    return rows


def write_csv(rows: Sequence[dict], path_or_file) -> None:
    own = isinstance(path_or_file, str)
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in CSV_COLUMNS})
    finally:
        if own:
            fh.close()


def read_csv(path: str) -> List[dict]:
    ints = {"run_id", "seed", "u", "ct", "gm", "st", "dss", "fst", "resolution_slots",
            "convergence_slots", "final_superframe", "control_packets", "removed_slots"}
    out = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row: Dict[str, Any] = {}
            for k in CSV_COLUMNS:
                v = raw[k]
                if v == "":
                    row[k] = None
                elif k in ("valid", "stalled"):
                    row[k] = v == "True"
                elif k in ints:
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out
