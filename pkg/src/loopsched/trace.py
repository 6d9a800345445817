"""Linearized traces of schedule executions: serialization, replay,
decision mutation, and validation.

A trace records only sampling and transformation instructions; host-language
control flow is never recorded. Replay re-runs analysis instructions against
the evolving program, so sampling domains are recomputed state-dependently.
A decision that falls outside its recomputed domain makes the trace invalid
(mutation proposals are filtered by the validator, never silently repaired).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from . import ir
from .ir import TensorProgram

SAMPLING_OPS = ("sample_perfect_tile", "sample_categorical", "sample_compute_location")


@dataclass(frozen=True)
class Instruction:
    op: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    outputs: tuple[str, ...] = ()
    decision: Optional[dict] = None

    def to_json(self) -> dict:
        d = {"op": self.op, "inputs": list(self.inputs), "attrs": self.attrs,
             "outputs": list(self.outputs)}
        if self.decision is not None:
            d["decision"] = self.decision
        return d


@dataclass(frozen=True)
class Trace:
    instructions: tuple[Instruction, ...]
    workload_hash: Optional[int] = None
    validated: bool = False

    def sampling_indices(self) -> list[int]:
        return [i for i, ins in enumerate(self.instructions) if ins.op in SAMPLING_OPS]

    def prior_log_prob(self) -> float:
        total = 0.0
        for ins in self.instructions:
            if ins.op not in SAMPLING_OPS:
                continue
            if ins.op == "sample_categorical":
                total += math.log(ins.decision["prob"])
            else:
                total += -math.log(ins.decision["size"])
        return total


def trace_prior(t: Trace) -> float:
    """Log prior probability of the trace's decisions; requires a validated
    trace so domain sizes reflect the states they were drawn against."""
    if not t.validated:
        raise ValueError("trace_prior requires a validated trace")
    return t.prior_log_prob()


# ---------------------------------------------------------------------------
# Serialization: JSON lines, one instruction per line, with a header line
# recording the workload's structural hash.
# ---------------------------------------------------------------------------

class TraceParseError(ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


def serialize_trace(t: Trace) -> str:
    lines = []
    if t.workload_hash is not None:
        lines.append(json.dumps({"workload_hash": t.workload_hash}, sort_keys=True))
    for ins in t.instructions:
        lines.append(json.dumps(ins.to_json(), sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def _check_refs(inputs, defined: set[str], lineno: int) -> None:
    for x in inputs:
        if isinstance(x, str) and x.startswith("%"):
            if x not in defined:
                raise TraceParseError(lineno, f"reference {x} used before definition")
        elif isinstance(x, list):
            _check_refs(x, defined, lineno)


def deserialize_trace(text: str) -> Trace:
    instructions = []
    workload_hash = None
    defined: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceParseError(lineno, exc.msg) from None
        if not isinstance(doc, dict):
            raise TraceParseError(lineno, "expected an object")
        if "workload_hash" in doc and "op" not in doc:
            if lineno != 1:
                raise TraceParseError(lineno, "header line must come first")
            workload_hash = doc["workload_hash"]
            continue
        if "op" not in doc:
            raise TraceParseError(lineno, "missing 'op'")
        op = doc["op"]
        decision = doc.get("decision")
        if (decision is not None) != (op in SAMPLING_OPS):
            raise TraceParseError(
                lineno, f"decision must be present exactly for sampling ops ({op})")
        inputs = tuple(doc.get("inputs", []))
        _check_refs(inputs, defined, lineno)
        outputs = tuple(doc.get("outputs", []))
        defined.update(outputs)
        instructions.append(Instruction(op, inputs, doc.get("attrs", {}), outputs, decision))
    return Trace(tuple(instructions), workload_hash=workload_hash, validated=False)


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

class ReplayError(Exception):
    def __init__(self, index: int, reason: str):
        self.index = index
        self.reason = reason
        super().__init__(f"instruction {index}: {reason}")


def _resolve_arg(x, env, index):
    if isinstance(x, str) and x.startswith("%"):
        try:
            return env[x]
        except KeyError:
            raise ReplayError(index, f"unresolved reference {x}") from None
    if isinstance(x, list):
        return [_resolve_arg(i, env, index) for i in x]
    return x


def _bind(instr: Instruction, refs, env, index: int, what: str) -> None:
    if len(refs) != len(instr.outputs):
        raise ReplayError(index, f"{what} produced {len(refs)} outputs, trace "
                                 f"recorded {len(instr.outputs)}")
    for old_id, ref in zip(instr.outputs, refs):
        env[old_id] = ref


def replay(e0: TensorProgram, t: Trace, mode: str = "follow",
           seed: int = 0) -> tuple[TensorProgram, Trace]:
    """Execute the trace's instructions on a fresh schedule state.

    mode 'follow' reuses recorded decisions (erroring when one falls outside
    its recomputed domain); mode 'resample' draws fresh decisions. Returns the
    final program together with the re-recorded trace.
    """
    from .schedule import ScheduleError, ScheduleState

    if mode not in ("follow", "resample"):
        raise ValueError(f"unknown replay mode {mode!r}")
    if t.workload_hash is not None and t.workload_hash != ir.structural_hash(e0):
        raise ReplayError(-1, "trace was recorded against a different workload "
                              "(structural hash mismatch)")
    follow = mode == "follow"
    state = ScheduleState(e0, seed=seed)
    env: dict = {}

    for index, instr in enumerate(t.instructions):
        try:
            _step(state, instr, env, index, follow)
        except ScheduleError as exc:
            raise ReplayError(index, str(exc)) from None
    new_trace = replace(state.trace(), workload_hash=t.workload_hash,
                        validated=True)
    return state.program, new_trace


def _step(state, instr: Instruction, env: dict, index: int, follow: bool) -> None:
    from .schedule import ScheduleError

    op = instr.op
    args = [_resolve_arg(x, env, index) for x in instr.inputs]
    if op == "get_blocks":
        _bind(instr, state.get_blocks(), env, index, "get_blocks")
    elif op == "get_loops":
        _bind(instr, state.get_loops(args[0]), env, index, "get_loops")
    elif op == "split":
        _bind(instr, state.split(args[0], args[1]), env, index, "split")
    elif op == "fuse":
        _bind(instr, [state.fuse(args[0])], env, index, "fuse")
    elif op == "reorder":
        state.reorder(args[0])
    elif op == "compute_at":
        if instr.attrs.get("location") == "root":
            state.compute_at(args[0], "root")
        else:
            state.compute_at(args[0], args[1])
    elif op == "inline":
        state.inline(args[0])
    elif op == "parallelize":
        state.parallelize(args[0])
    elif op == "vectorize":
        state.vectorize(args[0])
    elif op == "unroll":
        state.unroll(args[0])
    elif op == "tensorize":
        state.tensorize(args[0], instr.attrs["intrinsic"])
    elif op == "sample_perfect_tile":
        decision = instr.decision["tile"] if follow else None
        refs = state.sample_perfect_tile(args[0], instr.attrs["n"], _decision=decision)
        _bind(instr, refs, env, index, op)
    elif op == "sample_categorical":
        decision = instr.decision["index"] if follow else None
        ref = state.sample_categorical(instr.attrs["candidates"], instr.attrs["probs"],
                                       _decision=decision)
        _bind(instr, [ref], env, index, op)
    elif op == "sample_compute_location":
        decision = instr.decision["index"] if follow else None
        ref = state.sample_compute_location(args[0], _decision=decision)
        _bind(instr, [ref], env, index, op)
    else:
        raise ScheduleError(f"unknown instruction op {op!r}")


# ---------------------------------------------------------------------------
# Validation and mutation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Accepted:
    program: TensorProgram
    trace: Trace


@dataclass(frozen=True)
class Rejected:
    reason: str
    index: int


Verdict = Union[Accepted, Rejected]


def validate_trace(e0: TensorProgram, t: Trace) -> Verdict:
    """Replay with recorded decisions; accepted iff every primitive
    precondition holds and every decision lies in its recomputed domain."""
    try:
        program, normalized = replay(e0, t, mode="follow")
    except ReplayError as exc:
        return Rejected(exc.reason, exc.index)
    return Accepted(program, normalized)


def _mutation_domain(instr: Instruction) -> list:
    """Alternative decisions for one sampling instruction, drawn from the
    domain as recorded (the validator re-checks against the live state)."""
    from .schedule import ordered_factorizations

    if instr.op == "sample_perfect_tile":
        current = tuple(instr.decision["tile"])
        domain = ordered_factorizations(instr.attrs["extent"], instr.attrs["n"])
        return [list(x) for x in domain if x != current]
    if instr.op == "sample_categorical":
        probs = instr.attrs["probs"]
        current = instr.decision["index"]
        return [i for i, w in enumerate(probs) if w > 0 and i != current]
    if instr.op == "sample_compute_location":
        current = instr.decision["index"]
        return [i for i in range(instr.decision["size"]) if i != current]
    raise ValueError(f"not a sampling op: {instr.op}")


def mutate(t: Trace, rng: random.Random) -> tuple[Trace, Optional[int]]:
    """Replace one sampling decision with a different value from its domain.
    Returns (trace, mutated instruction index); the index is None when every
    domain is a singleton (the trace is returned unchanged)."""
    eligible = [(i, _mutation_domain(t.instructions[i])) for i in t.sampling_indices()]
    eligible = [(i, dom) for i, dom in eligible if dom]
    if not eligible:
        return t, None
    pos, domain = eligible[rng.randrange(len(eligible))]
    choice = domain[rng.randrange(len(domain))]
    old = t.instructions[pos]
    if old.op == "sample_perfect_tile":
        decision = dict(old.decision, tile=choice)
    elif old.op == "sample_categorical":
        probs = old.attrs["probs"]
        total = float(sum(probs))
        decision = dict(old.decision, index=choice, prob=float(probs[choice]) / total)
    else:
        decision = dict(old.decision, index=choice)
    instructions = list(t.instructions)
    instructions[pos] = replace(old, decision=decision)
    return Trace(tuple(instructions), workload_hash=t.workload_hash,
                 validated=False), pos
