"""Deterministic analytic latency model.

Latency is a recursive cost over the loop tree, in abstract cycles as exact
rationals. The model rewards the behaviors the search space manipulates:
cache-resident inner tiles (suffix footprint), contiguous vectorization,
outermost parallelism, unrolling of short loops, and tensor-unit calls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from fractions import Fraction

from . import ir
from .ir import Compute, Intrinsic, Loop, Stmt, TensorProgram
from .schedule import INTRINSICS

UNROLL_DISCOUNT_MAX_EXTENT = 16


@dataclass(frozen=True)
class MachineSpec:
    cores: int = 4
    vector_lanes: int = 8
    cache_capacity: int = 4096
    hit_cost: int = 1
    miss_cost: int = 8
    flop_cost: int = 1
    unroll_discount: float = 0.9
    tensor_unit_cost: int = 8

    def __post_init__(self):
        for name in ("cores", "vector_lanes", "cache_capacity", "hit_cost",
                     "miss_cost", "flop_cost", "tensor_unit_cost"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.unroll_discount <= 1:
            raise ValueError("unroll_discount must be in (0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "MachineSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown machine parameters: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str) -> "MachineSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


# ---------------------------------------------------------------------------
# Access analysis
# ---------------------------------------------------------------------------

def _accesses(stmt: Stmt) -> list[tuple[str, tuple, str]]:
    """(buffer, index exprs, phase) for every memory access of a statement.
    Phases: 'main' runs every iteration; 'init'/'epilogue' run once per
    spatial point (amortized by the reduction trip count)."""
    out = []
    if isinstance(stmt, Compute):
        for l in ir.collect_loads(stmt.value):
            out.append((l.buffer, l.indices, "main"))
        out.append((stmt.buffer, stmt.indices, "main"))  # store
        if stmt.init is not None:
            out.append((stmt.buffer, stmt.indices, "main"))  # accumulator read
            for l in ir.collect_loads(stmt.init):
                out.append((l.buffer, l.indices, "init"))
            out.append((stmt.buffer, stmt.indices, "init"))
        if stmt.epilogue is not None:
            for l in ir.collect_loads(stmt.epilogue):
                out.append((l.buffer, l.indices, "epilogue"))
            out.append((stmt.buffer, stmt.indices, "epilogue"))
    return out


def _region_sizes(p: TensorProgram, stmt: Stmt, loops: list[Loop],
                  suffix_start: int) -> dict[str, int]:
    """Per-buffer element counts touched while the loops of the suffix range
    and everything above stays fixed (interval hull, clamped to the buffer)."""
    ranges = {l.var: (0, l.extent - 1) for l in loops[suffix_start:]}
    per_buffer: dict[str, list[list[tuple[int, int]]]] = {}

    def note(buf: str, indices, tile):
        spans = []
        for d, e in enumerate(indices):
            lo, hi = ir.expr_range(e, ranges)
            spans.append((lo, hi + tile[d] - 1))
        per_buffer.setdefault(buf, []).append(spans)

    if isinstance(stmt, Compute):
        for buf, indices, _ in _accesses(stmt):
            note(buf, indices, (1,) * len(indices))
    else:
        info = INTRINSICS[stmt.name]
        for buf, indices in stmt.operands:
            note(buf, indices, (info.tile[0],) * len(indices))

    out = {}
    for buf, span_lists in per_buffer.items():
        shape = p.buffer(buf).shape
        size = 1
        for d in range(len(shape)):
            lo = min(s[d][0] for s in span_lists)
            hi = max(s[d][1] for s in span_lists)
            size *= max(1, min(hi - lo + 1, shape[d]))
        out[buf] = size
    return out


def _cache_suffix_start(p, stmt, loops, spec: MachineSpec) -> int:
    """Smallest suffix start (longest suffix) whose total footprint fits in
    cache; len(loops)+1 marks the degenerate case where nothing fits."""
    for t in range(len(loops) + 1):
        if sum(_region_sizes(p, stmt, loops, t).values()) <= spec.cache_capacity:
            return t
    return len(loops) + 1  # nothing fits: every access misses


def _access_region(p: TensorProgram, buf: str, indices, tile,
                   ranges: dict[str, tuple[int, int]]) -> int:
    shape = p.buffer(buf).shape
    size = 1
    for d, e in enumerate(indices):
        lo, hi = ir.expr_range(e, ranges)
        size *= max(1, min(hi - lo + 1 + tile[d] - 1, shape[d]))
    return size


def classify_accesses(p: TensorProgram, stmt: Stmt, loops: list[Loop],
                      spec: MachineSpec) -> list[tuple[str, str, Fraction]]:
    """(buffer, phase, miss fraction) per access against the maximal
    cache-resident loop suffix.

    An access invariant to every loop above the suffix stays cached: miss
    fraction 0. Otherwise each suffix execution starts cold and loads the
    access's suffix region once, so the per-iteration miss fraction is
    region / suffix-trip-count (capped at 1, the fully streaming case)."""
    t = _cache_suffix_start(p, stmt, loops, spec)
    if isinstance(stmt, Intrinsic):
        return []  # intrinsic access cost is a fixed constant
    if t > len(loops):
        return [(buf, phase, Fraction(1)) for buf, idx, phase in _accesses(stmt)]
    above = {l.var for l in loops[:t]}
    suffix = loops[t:]
    trips = 1
    for l in suffix:
        trips *= l.extent
    ranges = {l.var: (0, l.extent - 1) for l in suffix}
    out = []
    for buf, indices, phase in _accesses(stmt):
        used = set()
        for e in indices:
            used |= ir.expr_vars(e)
        if not (used & above):
            out.append((buf, phase, Fraction(0)))
            continue
        region = _access_region(p, buf, indices, (1,) * len(indices), ranges)
        out.append((buf, phase, min(Fraction(1), Fraction(region, trips))))
    return out


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

def _vector_friendly(p: TensorProgram, node: Loop) -> bool:
    """Every enclosed access that depends on the loop var must be stride-1 in
    the buffer's last dimension."""
    v = node.var
    for _, stmt in ir.iter_stmts((node,)):
        if isinstance(stmt, Compute):
            acc = [(l.buffer, l.indices) for l in ir.collect_loads(stmt.value)]
            acc.append((stmt.buffer, stmt.indices))
            if stmt.init is not None:
                acc.extend((l.buffer, l.indices) for l in ir.collect_loads(stmt.init))
            if stmt.epilogue is not None:
                acc.extend((l.buffer, l.indices) for l in ir.collect_loads(stmt.epilogue))
        elif isinstance(stmt, Intrinsic):
            acc = [(b, idx) for b, idx in stmt.operands]
        else:
            continue
        for buf, indices in acc:
            if not any(v in ir.expr_vars(e) for e in indices):
                continue
            for e in indices[:-1]:
                if v in ir.expr_vars(e):
                    return False
            dec = ir.affine_coeffs(indices[-1])
            if dec is None or dec[0].get(v, 0) != 1:
                return False
    return True


def _stmt_cost(p, stmt, loops, spec: MachineSpec) -> Fraction:
    if isinstance(stmt, Intrinsic):
        info = INTRINSICS[stmt.name]
        return Fraction(spec.tensor_unit_cost
                        + info.operand_elements * spec.hit_cost)
    red = ir.reduction_vars(stmt, [l.var for l in loops])
    red_trip = 1
    for l in loops:
        if l.var in red:
            red_trip *= l.extent
    flops = ir.count_arith_ops(stmt.value) + (1 if stmt.init is not None else 0)
    amortized_flops = Fraction(0)
    if stmt.init is not None:
        amortized_flops += Fraction(ir.count_arith_ops(stmt.init), red_trip)
    if stmt.epilogue is not None:
        amortized_flops += Fraction(ir.count_arith_ops(stmt.epilogue), red_trip)
    cost = spec.flop_cost * (flops + amortized_flops)
    for _, phase, miss_frac in classify_accesses(p, stmt, loops, spec):
        c = spec.hit_cost + (spec.miss_cost - spec.hit_cost) * miss_frac
        cost += c if phase == "main" else c / red_trip
    return cost


def simulate_latency(p: TensorProgram, spec: MachineSpec = MachineSpec()) -> Fraction:
    """Deterministic abstract-cycle cost of a valid program."""
    discount = Fraction(str(spec.unroll_discount))

    def walk(stmt: Stmt, loops: list[Loop], parallel_seen: bool) -> Fraction:
        if isinstance(stmt, Loop):
            inner_parallel = parallel_seen or stmt.kind == "parallel"
            body = sum((walk(s, loops + [stmt], inner_parallel) for s in stmt.body),
                       Fraction(0))
            if stmt.kind == "serial":
                return stmt.extent * body
            if stmt.kind == "unrolled":
                if stmt.extent <= UNROLL_DISCOUNT_MAX_EXTENT:
                    return stmt.extent * body * discount
                return stmt.extent * body
            if stmt.kind == "vectorized":
                if _vector_friendly(p, stmt):
                    return _ceil_div(stmt.extent, spec.vector_lanes) * body
                return stmt.extent * body
            if stmt.kind == "parallel":
                if not parallel_seen:
                    return _ceil_div(stmt.extent, spec.cores) * body
                return stmt.extent * body
            raise ValueError(stmt.kind)
        return _stmt_cost(p, stmt, loops, spec)

    return sum((walk(s, [], False) for s in p.root), Fraction(0))


def footprint(p: TensorProgram, statement_path: tuple[int, ...]) -> list[dict[str, int]]:
    """Per-buffer touched region sizes for every loop suffix of the statement
    at ``statement_path``: entry t fixes the outermost t loops and lets the
    rest range (entry 0 is the whole nest)."""
    stmt = ir.get_stmt(p.root, statement_path)
    loops = [l for _, l in ir.enclosing_loops(p.root, statement_path)]
    return [_region_sizes(p, stmt, loops, t) for t in range(len(loops) + 1)]
