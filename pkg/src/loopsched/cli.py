"""Command-line front end: tune, replay, enumerate, list-workloads,
show-space. All commands are deterministic given their flags and seed
(METASCHED_SEED is the fallback seed source)."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import ir, interp
from .machine import MachineSpec, simulate_latency
from .search import SearchConfig, tune
from .spaces import (default_space_config, enumerate_space, run_generator,
                     space_from_config)
from .trace import ReplayError, deserialize_trace, replay
from .workloads import REGISTRY, build_workload


class CliError(Exception):
    pass


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("METASCHED_SEED")
    return int(env) if env else 0


def _load_machine(path) -> MachineSpec:
    if path is None:
        return MachineSpec()
    try:
        return MachineSpec.load(path)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(f"bad machine spec {path}: {exc}") from None


def _load_space(path):
    if path is None:
        doc = default_space_config()
    else:
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"bad space config {path}: {exc}") from None
    try:
        return space_from_config(doc)
    except ValueError as exc:
        raise CliError(f"bad space config: {exc}") from None


def _build(args):
    try:
        return build_workload(args.workload, args.shape)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _add_workload_flags(p):
    p.add_argument("--workload", required=True, help="builtin workload name")
    p.add_argument("--shape", type=int, nargs="*", default=None,
                   help="shape parameters (defaults per workload)")


def _cmd_tune(args) -> int:
    e0 = _build(args)
    generator = _load_space(args.space)
    machine = _load_machine(args.machine)
    config = SearchConfig(trials=args.trials, batch=args.batch,
                          seed=_resolve_seed(args.seed), jobs=args.jobs)
    report = tune(e0, generator, config, machine)
    doc = report.to_json(timestamp=not args.no_timestamp)
    doc["workload_name"] = args.workload
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=2)
            f.write("\n")
    baseline = float(report.baseline_latency)
    best = float(report.best_latency)
    print(f"workload {args.workload}: baseline latency {baseline:.1f} cycles")
    print(f"best latency {best:.1f} cycles after {len(report.log)} trials "
          f"(speedup {report.speedup:.2f}x)")
    if args.out:
        print(f"report written to {args.out}")
    return 0


def _cmd_replay(args) -> int:
    e0 = _build(args)
    machine = _load_machine(args.machine)
    try:
        with open(args.trace) as f:
            t = deserialize_trace(f.read())
    except OSError as exc:
        raise CliError(str(exc)) from None
    except Exception as exc:
        raise CliError(f"bad trace file: {exc}") from None
    try:
        program, _ = replay(e0, t, mode="follow")
    except ReplayError as exc:
        raise CliError(f"replay failed: {exc}") from None
    print(ir.pretty_print(program), end="")
    print(f"simulated latency: {float(simulate_latency(program, machine)):.1f} cycles")
    if args.check_semantics:
        for seed in range(args.seeds):
            inputs = interp.random_inputs(e0, seed)
            if not interp.outputs_equal(interp.run(e0, inputs),
                                        interp.run(program, inputs)):
                raise CliError(f"semantic mismatch against the workload at seed {seed}")
        print(f"semantics verified on {args.seeds} random input seeds")
    return 0


def _cmd_enumerate(args) -> int:
    e0 = _build(args)
    generator = _load_space(args.space)
    machine = _load_machine(args.machine)
    if args.cap < 1:
        raise CliError("--cap must be positive")
    space = enumerate_space(e0, generator, cap=args.cap)
    latencies = {}
    entries = []
    for t, h in zip(space.traces, space.program_hashes):
        if h not in latencies:
            prog, _ = replay(e0, t, mode="follow")
            latencies[h] = simulate_latency(prog, machine)
        entries.append({"hash": h, "latency": float(latencies[h]),
                        "exact": str(latencies[h]),
                        "trace": [i.to_json() for i in t.instructions]})
    doc = {"workload": args.workload, "workload_hash": ir.structural_hash(e0),
           "traces": len(space.traces), "distinct_programs": len(latencies),
           "capped": space.capped, "programs": entries}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=2)
            f.write("\n")
        print(f"enumeration written to {args.out}")
    best = min(latencies.values()) if latencies else None
    print(f"{len(space.traces)} traces, {len(latencies)} distinct programs"
          + (" (capped)" if space.capped else ""))
    if best is not None:
        print(f"best simulated latency: {float(best):.1f} cycles")
    return 0


def _cmd_list_workloads(args) -> int:
    for name in sorted(REGISTRY):
        spec = REGISTRY[name]
        params = ", ".join(f"{p}={d}" for p, d in zip(spec.params, spec.defaults))
        print(f"{name}({params})  -- {spec.description}")
    return 0


def _cmd_show_space(args) -> int:
    e0 = _build(args)
    generator = _load_space(args.space)
    program, trace = run_generator(e0, generator, seed=_resolve_seed(args.seed))
    print(ir.pretty_print(program), end="")
    print(f"# {len(trace.instructions)} trace instructions, "
          f"prior log-prob {trace.prior_log_prob():.4f}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopsched",
        description="tensor-program scheduling and simulated autotuning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="search for a fast schedule")
    _add_workload_flags(p)
    p.add_argument("--space", help="space config JSON (default: built-in space)")
    p.add_argument("--machine", help="machine spec JSON (default: built-in)")
    p.add_argument("--trials", type=int, default=512)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write the tuning report JSON here")
    p.add_argument("--no-timestamp", action="store_true",
                   help="omit the timestamp field from the report")
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("replay", help="replay a recorded trace")
    _add_workload_flags(p)
    p.add_argument("--trace", required=True, help="trace file (JSON lines)")
    p.add_argument("--machine", help="machine spec JSON")
    p.add_argument("--check-semantics", action="store_true",
                   help="interpreter-verify the result against the workload")
    p.add_argument("--seeds", type=int, default=3,
                   help="input seeds for --check-semantics")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("enumerate", help="brute-force a design space")
    _add_workload_flags(p)
    p.add_argument("--space", help="space config JSON")
    p.add_argument("--machine", help="machine spec JSON")
    p.add_argument("--cap", type=int, default=10000,
                   help="stop after this many distinct programs")
    p.add_argument("--out", help="write the enumeration JSON here")
    p.set_defaults(func=_cmd_enumerate)

    p = sub.add_parser("list-workloads", help="print the workload registry")
    p.set_defaults(func=_cmd_list_workloads)

    p = sub.add_parser("show-space", help="print one sampled program")
    _add_workload_flags(p)
    p.add_argument("--space", help="space config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_show_space)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
