"""Command line entry point: ``dstr {run,sweep,baseline,validate,gen-topology}``.

Exit codes: 0 success, 1 configuration error, 2 validation failure,
3 no convergence within the slot budget.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import List, Optional

from . import __version__
from . import channel as ch
from .baseline import ORDERS, BY_ID, greedy_allocate
from .engine import MGMT_MODELS, ScenarioError, StopCondition, run, validate_allocation, write_trace
from .harness import (ConfigError, ExperimentError, ExperimentSpec, build_scenario, load_json,
                      run_experiment)
from .topology import gen_hex_grid, gen_hex_rings, gen_single_hop

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3

log = logging.getLogger("dstr")


def _stop(text):
    try:
        return str(StopCondition.parse(text))
    except ScenarioError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _dump(obj, path: Optional[str]):
    text = json.dumps(obj, indent=2, sort_keys=False)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# ------------------------------------------------------------------ commands

def cmd_run(args) -> int:
    cfg = load_json(args.config)
    sc = build_scenario(cfg, seed=args.seed, stop=args.stop, mgmt_model=args.mgmt_model,
                        trace=args.trace)
    result = run(sc)
    out = result.to_dict(include_trace=args.trace and not args.out)
    _dump(out, args.out)
    if args.trace and args.out:
        path = os.path.splitext(args.out)[0] + ".trace.jsonl"
        write_trace(result.trace, path)
        log.info("trace written to %s", path)
    if result.converged and not result.valid:
        log.error("converged allocation fails validation")
        return EXIT_INVALID
    if result.stalled:
        log.error("stalled after %d slots: some Start UAVs can never decode a beacon",
                  result.slots)
        return EXIT_NOT_CONVERGED
    if sc.stop.kind == "convergence" and not result.converged:
        log.error("no convergence within %d slots", result.slots)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_json(args.config)
    if not isinstance(cfg, dict):
        raise ConfigError("experiment: expected an object")
    if args.reps is not None:
        cfg["reps"] = args.reps
    if args.seed is not None:
        cfg["base_seed"] = args.seed
    scenario = cfg.get("scenario")
    if isinstance(scenario, dict):
        if args.stop is not None:
            scenario["stop"] = args.stop
        if args.mgmt_model is not None:
            scenario["mgmt_model"] = args.mgmt_model
    spec = ExperimentSpec.from_dict(cfg)
    out = args.out or spec.out
    try:
        result = run_experiment(spec, jobs=args.jobs, out=out)
    except ExperimentError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    if not out:
        _dump(result.summary, None)
    stop = StopCondition.parse(spec.scenario.get("stop", "convergence"))
    if stop.kind == "convergence" and not result.all_converged:
        missing = sum(r["convergence_slots"] is None for r in result.rows)
        log.error("%d of %d runs did not converge", missing, len(result.rows))
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _formation_from_args(args):
    """Formation, channel and beacon power from --config or the topology flags."""
    if args.config:
        sc = build_scenario(load_json(args.config))
        return sc.formation, sc.channel, sc.protocol.beacon_tx_power
    formation = _generated(args)
    channel = ch.ChannelParams()
    return formation, channel, ch.beacon_tx_power(formation.safety_radius, channel)


def _generated(args):
    spacing = args.spacing
    chosen = [args.rings is not None, args.rows is not None or args.cols is not None,
              args.single_hop is not None]
    if sum(chosen) != 1:
        raise ConfigError("choose exactly one of --rings, --rows/--cols, --single-hop")
    if args.rings is not None:
        return gen_hex_rings(args.rings, spacing, args.safety_radius)
    if args.single_hop is not None:
        return gen_single_hop(args.single_hop, args.safety_radius or 10.0)
    if args.rows is None or args.cols is None:
        raise ConfigError("--rows and --cols go together")
    return gen_hex_grid(args.rows, args.cols, spacing, args.safety_radius)


def cmd_baseline(args) -> int:
    formation, channel, power = _formation_from_args(args)
    sched = greedy_allocate(formation, channel, power, order=args.order)
    violations = validate_allocation(sched.assignment, sched.slot_count, formation, channel, power)
    if args.out:
        sched.write_csv(args.out)
    _dump({"u": formation.size, "order": sched.order, "slot_count": sched.slot_count,
           "reuse": sched.reuse, "valid": not violations}, None)
    return EXIT_INVALID if violations else EXIT_OK


def _read_schedule(path: str):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        assignment = {int(r["uav"]): int(r["slot"]) for r in rows}
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: expected columns uav,slot ({exc})") from None
    return assignment, max(assignment.values(), default=0)


def _read_result(path: str):
    data = load_json(path)
    try:
        assignment = {int(k): int(v) for k, v in data["assignment"].items()}
        return assignment, int(data["final_superframe"])
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"{path}: not a run result ({exc})") from None


def _read_trace(path: str):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: line {lineno}: {exc.msg}") from None
    if not rows:
        raise ConfigError(f"{path}: empty trace")
    last = max(r["superframe"] for r in rows)
    final = [r for r in rows if r["superframe"] == last and r["state"] != "left"]
    sizes = {r["superframe_size"] for r in final if r["state"] != "start"}
    if len(sizes) != 1:
        raise ConfigError(f"{path}: superframe sizes disagree at the last superframe: {sorted(sizes)}")
    return {int(r["uav"]): r["claimed_slot"] for r in final}, sizes.pop()


def cmd_validate(args) -> int:
    formation, channel, power = _formation_from_args(args)
    path = args.file
    if path.endswith(".csv"):
        assignment, n = _read_schedule(path)
    elif path.endswith(".jsonl"):
        assignment, n = _read_trace(path)
    else:
        assignment, n = _read_result(path)
    if any(u >= formation.size or u < 0 for u in assignment):
        raise ConfigError(f"{path}: UAV ids outside the formation of {formation.size}")
    violations = validate_allocation(assignment, n, formation, channel, power,
                                     check_empty=not args.allow_empty)
    _dump({"slots": n, "violations": [str(v) for v in violations], "valid": not violations},
          None)
    return EXIT_INVALID if violations else EXIT_OK


def cmd_gen_topology(args) -> int:
    formation = _generated(args)
    if args.out:
        formation.write_csv(args.out)
    else:
        formation.write_csv(sys.stdout)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_topology_args(p, required=True):
    p.add_argument("--rings", type=int, help="hexagonal formation with this many rings")
    p.add_argument("--rows", type=int, help="hexagonal grid rows")
    p.add_argument("--cols", type=int, help="hexagonal grid columns")
    p.add_argument("--single-hop", type=int, metavar="U", help="U mutually adjacent UAVs")
    p.add_argument("--spacing", type=float, default=10.0, help="lattice spacing in m")
    p.add_argument("--safety-radius", type=float, default=None,
                   help="neighborhood radius in m (default: spacing)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dstr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=_seed, help="run seed (sweep: base seed)")
        p.add_argument("--stop", type=_stop, help="resolution | convergence | slots:N")
        p.add_argument("--mgmt-model", choices=sorted(MGMT_MODELS),
                       help="reception model for management slots")

    p = sub.add_parser("run", help="run one scenario and print its result as JSON")
    p.add_argument("--config", required=True)
    common(p)
    p.add_argument("--out", help="write the JSON result here instead of stdout")
    p.add_argument("--trace", action="store_true",
                   help="record per-superframe UAV states (JSONL next to --out)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run an experiment grid")
    p.add_argument("--config", required=True)
    common(p)
    p.add_argument("--reps", type=_positive, help="replications per cell")
    p.add_argument("--out", help="per-run CSV (summary JSON goes alongside)")
    p.add_argument("--jobs", type=_positive, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("baseline", help="centralized greedy schedule for a formation")
    p.add_argument("--config", help="scenario config providing formation and channel")
    _add_topology_args(p)
    p.add_argument("--order", choices=ORDERS, default=BY_ID)
    p.add_argument("--out", help="write the schedule CSV (uav,slot) here")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("validate", help="re-check a schedule CSV, run result JSON or trace JSONL")
    p.add_argument("file")
    p.add_argument("--config", help="scenario config providing formation and channel")
    _add_topology_args(p)
    p.add_argument("--allow-empty", action="store_true",
                   help="do not flag slots without a transmitter")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen-topology", help="emit formation positions as CSV")
    _add_topology_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_topology)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
