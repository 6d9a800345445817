"""Schedule state and transformation/sampling primitives.

Every primitive both rewrites the current program and appends one
instruction to the trace under construction, so a recorded trace replays
to the same program. Handles (block/loop/random-var references) are
name-based and die when a transformation consumes the named node.
"""

from __future__ import annotations

import functools
import math
import random
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

from . import ir
from .ir import (BinOp, Compute, IntConst, Intrinsic, Load, Loop, Select,
                 Stmt, TensorProgram, Var)
from .trace import Instruction, Trace


class ScheduleError(Exception):
    """A primitive precondition was violated."""


# ---------------------------------------------------------------------------
# Intrinsics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntrinsicInfo:
    name: str
    tile: tuple[int, int, int]   # extents of the matched loop nest
    flops: int                   # scalar-equivalent arithmetic ops
    operand_elements: int        # elements touched per call


# tu.mma4: C[i,j] += A[i,k] * B[k,j] over a 4x4x4 tile.
INTRINSICS: dict[str, IntrinsicInfo] = {
    "tu.mma4": IntrinsicInfo("tu.mma4", (4, 4, 4), flops=128, operand_elements=48),
}


# ---------------------------------------------------------------------------
# References
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Ref:
    id: str
    payload: object
    alive: bool = True


class BlockRef(Ref):
    pass


class LoopRef(Ref):
    pass


class RandomVarRef(Ref):
    pass


FactorArg = Union[int, RandomVarRef]


def _prod(xs) -> int:
    return math.prod(xs) if xs else 1


@functools.lru_cache(maxsize=None)
def divisors(n: int) -> tuple[int, ...]:
    out = [d for d in range(1, n + 1) if n % d == 0]
    return tuple(out)


@functools.lru_cache(maxsize=None)
def ordered_factorizations(extent: int, n: int) -> tuple[tuple[int, ...], ...]:
    """All ordered n-tuples of positive integers with the given product,
    in lexicographic order."""
    if n == 1:
        return ((extent,),)
    out = []
    for d in divisors(extent):
        for rest in ordered_factorizations(extent // d, n - 1):
            out.append((d,) + rest)
    return tuple(out)


def _simplify_affine(e: ir.Expr) -> ir.Expr:
    dec = ir.affine_coeffs(e)
    if dec is None:
        return e
    coeffs, c0 = dec
    expr: Optional[ir.Expr] = IntConst(c0) if (c0 != 0 or not coeffs) else None
    for v in sorted(coeffs):
        term = Var(v) if coeffs[v] == 1 else BinOp("mul", Var(v), IntConst(coeffs[v]))
        expr = term if expr is None else BinOp("add", expr, term)
    return expr


def _mixed_radix_width(terms: list[tuple[int, int]]) -> Optional[int]:
    """Width of the contiguous range covered by sum(coeff * x) with
    x in [0, extent); None when the coverage has gaps or negative strides."""
    cover = 1
    for coeff, extent in sorted(terms):
        if coeff <= 0:
            return None
        if coeff > cover:
            return None
        cover += coeff * (extent - 1)
    return cover


# ---------------------------------------------------------------------------
# Schedule state
# ---------------------------------------------------------------------------

class ScheduleState:
    def __init__(self, program: TensorProgram, seed: int = 0):
        ir.check_valid(program)
        self.program = program
        self.rng = random.Random(seed)
        self.instructions: list[Instruction] = []
        self.choice_hook = None  # optional scripted decision source (enumeration)
        self._refs: list[Ref] = []
        self._ref_counter = 0
        self._var_counter = 0

    # -- bookkeeping --------------------------------------------------------

    def snapshot(self):
        return (self.program, len(self.instructions), list(self._refs),
                [(r, r.alive) for r in self._refs], self._ref_counter,
                self._var_counter, self.rng.getstate(),
                self.choice_hook.state() if self.choice_hook else None)

    def restore(self, snap) -> None:
        (program, n_instr, refs, alive, ref_counter, var_counter, rngstate,
         hook_state) = snap
        self.program = program
        del self.instructions[n_instr:]
        self._refs = refs
        for r, a in alive:
            r.alive = a
        self._ref_counter = ref_counter
        self._var_counter = var_counter
        self.rng.setstate(rngstate)
        if self.choice_hook is not None:
            self.choice_hook.restore(hook_state)

    def _draw_index(self, size: int, probs=None) -> int:
        """Index draw for sampling primitives; routed through the choice hook
        when one is installed (used by exhaustive enumeration)."""
        if self.choice_hook is not None:
            return self.choice_hook.draw(size, probs)
        if probs is None:
            return self.rng.randrange(size)
        total = float(sum(probs))
        r = self.rng.random() * total
        acc = 0.0
        for i, w in enumerate(probs):
            acc += w
            if r < acc:
                return i
        return size - 1

    def block_exists(self, ref: BlockRef) -> bool:
        return (isinstance(ref, BlockRef) and ref.alive
                and ir.find_block(self.program.root, ref.payload) is not None)

    def trace(self) -> Trace:
        return Trace(tuple(self.instructions),
                     workload_hash=None, validated=True)

    def _fresh_var(self) -> str:
        name = f"x{self._var_counter}"
        self._var_counter += 1
        return name

    def _new_ref(self, cls, payload) -> Ref:
        ref = cls(f"%{self._ref_counter}", payload)
        self._ref_counter += 1
        self._refs.append(ref)
        return ref

    def _record(self, op: str, inputs: list, attrs: dict, outputs: Sequence[Ref],
                decision: Optional[dict] = None) -> None:
        def encode(x):
            if isinstance(x, Ref):
                return x.id
            if isinstance(x, (list, tuple)):
                return [encode(i) for i in x]
            return x

        self.instructions.append(Instruction(
            op=op, inputs=tuple(encode(i) for i in inputs), attrs=dict(attrs),
            outputs=tuple(r.id for r in outputs), decision=decision))

    def _set_program(self, p: TensorProgram) -> None:
        diags = ir.validate_ir(p)
        if diags:
            raise ScheduleError("transformation produced invalid IR: " + "; ".join(diags))
        self.program = p

    def _kill_loops(self, var_names: set[str]) -> None:
        for r in self._refs:
            if isinstance(r, LoopRef) and r.payload in var_names:
                r.alive = False

    def _kill_blocks(self, names: set[str]) -> None:
        for r in self._refs:
            if isinstance(r, BlockRef) and r.payload in names:
                r.alive = False

    # -- resolution ---------------------------------------------------------

    def _resolve_loop(self, ref) -> tuple[tuple[int, ...], Loop]:
        if isinstance(ref, RandomVarRef):
            kind, val = ref.payload
            if kind != "loc" or not (isinstance(val, tuple) and val[0] == "loop"):
                raise ScheduleError(f"{ref.id} is not a loop location")
            path = ir.find_loop(self.program.root, val[1])
            if not ref.alive or path is None:
                raise ScheduleError(f"dead handle {ref.id} (loop {val[1]})")
            return path, ir.get_stmt(self.program.root, path)
        if not isinstance(ref, LoopRef):
            raise ScheduleError(f"expected a loop handle, got {type(ref).__name__}")
        path = ir.find_loop(self.program.root, ref.payload)
        if not ref.alive or path is None:
            raise ScheduleError(f"dead handle {ref.id} (loop {ref.payload})")
        return path, ir.get_stmt(self.program.root, path)

    def _resolve_block(self, ref) -> tuple[tuple[int, ...], Stmt]:
        if not isinstance(ref, BlockRef):
            raise ScheduleError(f"expected a block handle, got {type(ref).__name__}")
        path = ir.find_block(self.program.root, ref.payload)
        if not ref.alive or path is None:
            raise ScheduleError(f"dead handle {ref.id} (block {ref.payload})")
        return path, ir.get_stmt(self.program.root, path)

    def _resolve_factor(self, f: FactorArg) -> int:
        if isinstance(f, RandomVarRef):
            if not f.alive:
                raise ScheduleError(f"dead handle {f.id}")
            kind, val = f.payload
            if kind != "int":
                raise ScheduleError(f"{f.id} is not an integer random variable")
            return val
        if isinstance(f, int):
            return f
        raise ScheduleError(f"factor must be int or random variable, got {type(f).__name__}")

    def value_of(self, ref: RandomVarRef):
        if not isinstance(ref, RandomVarRef) or not ref.alive:
            raise ScheduleError("dead or non-random-variable handle")
        return ref.payload[1]

    # -- analysis primitives -------------------------------------------------

    def get_blocks(self) -> list[BlockRef]:
        refs = [self._new_ref(BlockRef, ir.block_name(s))
                for _, s in ir.iter_stmts(self.program.root)
                if isinstance(s, (Compute, Intrinsic))]
        self._record("get_blocks", [], {}, refs)
        return refs

    def get_loops(self, block: BlockRef) -> list[LoopRef]:
        path, _ = self._resolve_block(block)
        refs = [self._new_ref(LoopRef, loop.var)
                for _, loop in ir.enclosing_loops(self.program.root, path)]
        self._record("get_loops", [block], {}, refs)
        return refs

    # -- transformations -----------------------------------------------------

    def split(self, loop: LoopRef, factors: Sequence[FactorArg]) -> list[LoopRef]:
        path, node = self._resolve_loop(loop)
        vals = [self._resolve_factor(f) for f in factors]
        if not vals or any(v < 1 for v in vals):
            raise ScheduleError("split factors must be positive")
        if _prod(vals) != node.extent:
            raise ScheduleError(
                f"split of {node.var}: factor product {_prod(vals)} != extent {node.extent}")
        new_vars = [self._fresh_var() for _ in vals]
        terms = [BinOp("mul", Var(v), IntConst(_prod(vals[i + 1:])))
                 if _prod(vals[i + 1:]) != 1 else Var(v)
                 for i, v in enumerate(new_vars)]
        recomb: ir.Expr = terms[0]
        for t in terms[1:]:
            recomb = BinOp("add", recomb, t)
        body = tuple(ir.substitute_stmt(s, {node.var: recomb}) for s in node.body)
        nest: tuple[Stmt, ...] = body
        for v, e in zip(reversed(new_vars), reversed(vals)):
            nest = (Loop(v, e, "serial", nest),)
        self._set_program(TensorProgram(
            self.program.buffers, ir.replace_stmt(self.program.root, path, list(nest))))
        self._kill_loops({node.var})
        refs = [self._new_ref(LoopRef, v) for v in new_vars]
        self._record("split", [loop, list(factors)], {}, refs)
        return refs

    def _loop_chain(self, refs: Sequence[LoopRef]) -> list[tuple[tuple[int, ...], Loop]]:
        resolved = [self._resolve_loop(r) for r in refs]
        resolved.sort(key=lambda pl: len(pl[0]))
        for (p1, l1), (p2, l2) in zip(resolved, resolved[1:]):
            if len(p2) != len(p1) + 1 or p2[:len(p1)] != p1 or l1.body != (l2,):
                raise ScheduleError(
                    f"loops {l1.var} and {l2.var} are not adjacent in a perfect nest")
        return resolved

    @staticmethod
    def _block_var_use(stmt: Stmt, v: str) -> tuple[bool, bool]:
        """(in_store, carries_reduction) of loop var ``v`` for one block."""
        if isinstance(stmt, Compute):
            store_vars = set()
            for i in stmt.indices:
                store_vars |= ir.expr_vars(i)
            used = ir.expr_vars(stmt.value)
            if stmt.init is not None:
                used |= ir.expr_vars(stmt.init)
            red = stmt.init is not None and v in used and v not in store_vars
            return v in store_vars, red
        store_vars = set()
        for i in stmt.operands[0][1]:
            store_vars |= ir.expr_vars(i)
        in_vars = set()
        for _, idx in stmt.operands[1:]:
            for i in idx:
                in_vars |= ir.expr_vars(i)
        return v in store_vars, (v in in_vars and v not in store_vars)

    def _enclosed_blocks(self, node: Loop) -> list[Stmt]:
        return [stmt for _, stmt in ir.iter_stmts((node,))
                if isinstance(stmt, (Compute, Intrinsic))]

    def _loop_role(self, node: Loop) -> str:
        """'parallel' when the var appears in every enclosed store index and
        carries no reduction; 'reduction' when it carries a reduction for
        every enclosed block; 'mixed' otherwise."""
        is_par = True
        is_red = True
        for stmt in self._enclosed_blocks(node):
            in_store, red = self._block_var_use(stmt, node.var)
            if red or not in_store:
                is_par = False
            if not red:
                is_red = False
        if is_par:
            return "parallel"
        if is_red:
            return "reduction"
        return "mixed"

    def fuse(self, loops: Sequence[LoopRef]) -> LoopRef:
        if not loops:
            raise ScheduleError("fuse of an empty loop list")
        chain = self._loop_chain(loops)
        top_path, top = chain[0]
        roles = {self._loop_role(l) for _, l in chain}
        if len(roles) > 1 or "mixed" in roles:
            raise ScheduleError("fuse requires all-data-parallel or all-reduction loops")
        if len(chain) == 1:
            new_ref = self._new_ref(LoopRef, top.var)
            self._record("fuse", [list(loops)], {}, [new_ref])
            return new_ref
        inner_body = chain[-1][1].body
        extents = [l.extent for _, l in chain]
        fused_var = self._fresh_var()
        mapping = {}
        for i, (_, l) in enumerate(chain):
            inner_prod = _prod(extents[i + 1:])
            e: ir.Expr = Var(fused_var)
            if inner_prod != 1:
                e = BinOp("floordiv", e, IntConst(inner_prod))
            if i > 0:
                e = BinOp("mod", e, IntConst(l.extent))
            mapping[l.var] = e
        body = tuple(ir.substitute_stmt(s, mapping) for s in inner_body)
        fused = Loop(fused_var, _prod(extents), "serial", body)
        self._set_program(TensorProgram(
            self.program.buffers, ir.replace_stmt(self.program.root, top_path, [fused])))
        self._kill_loops({l.var for _, l in chain})
        new_ref = self._new_ref(LoopRef, fused_var)
        self._record("fuse", [list(loops)], {}, [new_ref])
        return new_ref

    def reorder(self, loops: Sequence[LoopRef]) -> None:
        if not loops:
            raise ScheduleError("reorder of an empty loop list")
        chain = self._loop_chain(loops)
        order = {id(r): i for i, r in enumerate(loops)}
        resolved = [self._resolve_loop(r) for r in loops]
        top_path = chain[0][0]
        inner_body = chain[-1][1].body
        nest: tuple[Stmt, ...] = inner_body
        for _, node in reversed(resolved):
            nest = (Loop(node.var, node.extent, node.kind, nest),)
        self._set_program(TensorProgram(
            self.program.buffers, ir.replace_stmt(self.program.root, top_path, list(nest))))
        self._record("reorder", [list(loops)], {}, [])

    def _set_kind(self, loop: LoopRef, kind: str, op: str) -> None:
        path, node = self._resolve_loop(loop)
        self._set_program(TensorProgram(
            self.program.buffers,
            ir.replace_stmt(self.program.root, path, [replace(node, kind=kind)])))
        self._record(op, [loop], {}, [])

    def parallelize(self, loop: LoopRef) -> None:
        _, node = self._resolve_loop(loop)
        self._require_data_parallel(node, "parallelize")
        self._set_kind(loop, "parallel", "parallelize")

    def vectorize(self, loop: LoopRef) -> None:
        _, node = self._resolve_loop(loop)
        self._require_data_parallel(node, "vectorize")
        if any(isinstance(s, Loop) for _, s in ir.iter_stmts(node.body)):
            raise ScheduleError(f"vectorize: loop {node.var} is not innermost in its nest")
        self._set_kind(loop, "vectorized", "vectorize")

    def unroll(self, loop: LoopRef) -> None:
        _, node = self._resolve_loop(loop)
        if node.extent > 64:
            raise ScheduleError(f"unroll: extent {node.extent} exceeds 64")
        self._set_kind(loop, "unrolled", "unroll")

    def _require_data_parallel(self, node: Loop, what: str) -> None:
        v = node.var
        for stmt in self._enclosed_blocks(node):
            in_store, red = self._block_var_use(stmt, v)
            if red:
                raise ScheduleError(f"{what}: reduction-carried dependence on {v} "
                                    f"in block {ir.block_name(stmt)}")
            if not in_store:
                raise ScheduleError(f"{what}: loop var {v} is absent from the store "
                                    f"index of block {ir.block_name(stmt)}")

    # -- producer/consumer analysis ------------------------------------------

    def _writer_of(self, buf: str) -> Optional[str]:
        for _, stmt in ir.iter_stmts(self.program.root):
            if isinstance(stmt, Compute) and stmt.buffer == buf:
                return stmt.name
            if isinstance(stmt, Intrinsic) and stmt.operands[0][0] == buf:
                return stmt.block
        return None

    def _readers_of(self, buf: str) -> list[str]:
        """Blocks loading ``buf``, excluding its own writer (a reduction's
        accumulator/epilogue self-read is not a consumer)."""
        out = []
        for _, stmt in ir.iter_stmts(self.program.root):
            name = None
            if isinstance(stmt, Compute):
                if stmt.buffer != buf:
                    loads = []
                    for e in [stmt.value] + ([stmt.init] if stmt.init else []) \
                            + ([stmt.epilogue] if stmt.epilogue else []):
                        loads.extend(ir.collect_loads(e))
                    if any(l.buffer == buf for l in loads):
                        name = stmt.name
            elif isinstance(stmt, Intrinsic):
                if stmt.operands[0][0] != buf and any(b == buf for b, _ in stmt.operands[1:]):
                    name = stmt.block
            if name is not None and name not in out:
                out.append(name)
        return out

    def _is_elementwise(self, stmt: Stmt) -> bool:
        if not isinstance(stmt, Compute) or stmt.init is not None or stmt.epilogue is not None:
            return False
        if not all(isinstance(i, Var) for i in stmt.indices):
            return False
        names = [i.name for i in stmt.indices]
        if len(set(names)) != len(names):
            return False
        path = ir.find_block(self.program.root, stmt.name)
        loop_vars = {l.var for _, l in ir.enclosing_loops(self.program.root, path)}
        return set(names) == loop_vars

    def _counterpart(self, block_stmt: Compute) -> Optional[tuple[str, str]]:
        """(counterpart block, mode); mode 'at_producer' relocates this block
        (a consumer) into its producer's nest, 'at_consumer' relocates it
        (a producer) into its consumer's nest."""
        produced = []
        for l in ir.collect_loads(block_stmt.value):
            w = self._writer_of(l.buffer)
            if w is not None and w != block_stmt.name and w not in produced:
                produced.append(w)
        if len(produced) == 1:
            producer = produced[0]
            pstmt = ir.get_stmt(self.program.root,
                                ir.find_block(self.program.root, producer))
            pbuf = pstmt.buffer if isinstance(pstmt, Compute) else pstmt.operands[0][0]
            if self._readers_of(pbuf) == [block_stmt.name]:
                return producer, "at_producer"
        readers = self._readers_of(block_stmt.buffer)
        if len(readers) == 1:
            return readers[0], "at_consumer"
        return None

    @staticmethod
    def _access_terms(stmt: Stmt, buf: str, writes: bool):
        """(index exprs, per-dim tile extents) for each access of ``buf``."""
        out = []
        if isinstance(stmt, Compute):
            if writes:
                if stmt.buffer == buf:
                    out.append((stmt.indices, (1,) * len(stmt.indices)))
            else:
                exprs = [stmt.value] + ([stmt.init] if stmt.init else []) \
                    + ([stmt.epilogue] if stmt.epilogue else [])
                for e in exprs:
                    for l in ir.collect_loads(e):
                        if l.buffer == buf:
                            out.append((l.indices, (1,) * len(l.indices)))
        elif isinstance(stmt, Intrinsic):
            info = INTRINSICS[stmt.name]
            operands = stmt.operands[:1] if writes else stmt.operands[1:]
            for b, idx in operands:
                if b == buf:
                    out.append((idx, (info.tile[0],) * len(idx)))
        return out

    def _region_boxes(self, accesses, outer_vars: set[str], inner_extents: dict[str, int]):
        """Per-dimension (base expr over outer vars, width) for the hull of
        the accessed region with inner loops free; None when non-affine,
        gapped, or inconsistently strided across accesses."""
        ndim = len(accesses[0][0])
        boxes = []
        for d in range(ndim):
            entries = []
            for idx, tile in accesses:
                dec = ir.affine_coeffs(idx[d])
                if dec is None:
                    return None
                coeffs, c0 = dec
                inner_terms = [(c, inner_extents[v]) for v, c in coeffs.items()
                               if v in inner_extents]
                if any(v not in inner_extents and v not in outer_vars for v in coeffs):
                    return None
                if tile[d] > 1:
                    inner_terms.append((1, tile[d]))
                width = _mixed_radix_width(inner_terms) if inner_terms else 1
                if width is None:
                    return None
                outer_part = {v: c for v, c in coeffs.items() if v in outer_vars}
                entries.append((outer_part, c0, width))
            base_coeffs = entries[0][0]
            if any(e[0] != base_coeffs for e in entries):
                return None
            lo = min(e[1] for e in entries)
            hi = max(e[1] + e[2] for e in entries)
            base = IntConst(lo)
            expr: ir.Expr = base
            for v in sorted(base_coeffs):
                term = Var(v) if base_coeffs[v] == 1 else \
                    BinOp("mul", Var(v), IntConst(base_coeffs[v]))
                expr = term if (isinstance(expr, IntConst) and expr.value == 0) \
                    else BinOp("add", expr, term)
            boxes.append((expr, hi - lo))
        return boxes

    def _attach_analysis(self, block_stmt: Compute, cp_name: str, mode: str,
                         attach_depth: int):
        """Box analysis for relocating ``block_stmt`` under the counterpart's
        loop at ``attach_depth``. Returns (boxes, cp_path) or None when the
        dependence precondition fails."""
        cp_path = ir.find_block(self.program.root, cp_name)
        cp_stmt = ir.get_stmt(self.program.root, cp_path)
        cp_loops = ir.enclosing_loops(self.program.root, cp_path)
        if attach_depth >= len(cp_loops):
            return None
        outer_vars = {l.var for _, l in cp_loops[:attach_depth + 1]}
        inner = {l.var: l.extent for _, l in cp_loops[attach_depth + 1:]}
        cp_vars = [l.var for _, l in cp_loops]

        if mode == "at_producer":
            # the counterpart's reduction must complete within one attach
            # iteration, i.e. every reduction loop sits below the attach loop
            if isinstance(cp_stmt, Compute):
                red = ir.reduction_vars(cp_stmt, cp_vars)
            else:
                red = ir.intrinsic_reduction_vars(cp_stmt, cp_vars)
            if any(v in outer_vars for v in red):
                return None
            pbuf = cp_stmt.buffer if isinstance(cp_stmt, Compute) else cp_stmt.operands[0][0]
            reads = self._access_terms(block_stmt, pbuf, writes=False)
            if len(reads) != 1:
                return None
            ridx = reads[0][0]
            if not all(isinstance(i, Var) for i in ridx):
                return None
            if len({i.name for i in ridx}) != len(ridx):
                return None
            # full-coverage requirement: the consumer's domain per dim matches
            # the producer buffer extent
            bpath = ir.find_block(self.program.root, block_stmt.name)
            extents = {l.var: l.extent for _, l in ir.enclosing_loops(self.program.root, bpath)}
            shape = self.program.buffer(pbuf).shape
            for d, i in enumerate(ridx):
                if extents.get(i.name) != shape[d]:
                    return None
            writes = self._access_terms(cp_stmt, pbuf, writes=True)
            boxes = self._region_boxes(writes, outer_vars, inner)
            if boxes is None:
                return None
            return boxes, [i.name for i in ridx]

        # at_consumer: produce the region the consumer's iteration reads
        reads = self._access_terms(cp_stmt, block_stmt.buffer, writes=False)
        if not reads:
            return None
        boxes = self._region_boxes(reads, outer_vars, inner)
        if boxes is None:
            return None
        store_vars = [i.name for i in block_stmt.indices]
        return boxes, store_vars

    def _attach_candidates(self, block_stmt: Compute):
        cp = self._counterpart(block_stmt)
        if cp is None:
            return None
        cp_name, mode = cp
        cp_path = ir.find_block(self.program.root, cp_name)
        cp_loops = ir.enclosing_loops(self.program.root, cp_path)
        out = []
        for depth in range(len(cp_loops)):
            if self._attach_analysis(block_stmt, cp_name, mode, depth) is not None:
                out.append(cp_loops[depth][1].var)
        return cp_name, mode, out

    def _exclusive_nest_path(self, path: tuple[int, ...]) -> tuple[int, ...]:
        """Topmost path whose subtree contains only the statement at ``path``."""
        while len(path) > 1:
            parent_path = path[:-1]
            parent = ir.get_stmt(self.program.root, parent_path)
            if len(parent.body) != 1:
                return path
            path = parent_path
        return path

    def compute_at(self, block: BlockRef, loop) -> None:
        if loop == "root" or loop is None or (
                isinstance(loop, RandomVarRef) and loop.payload == ("loc", "root")):
            self._resolve_block(block)
            self._record("compute_at", [block], {"location": "root"}, [])
            return
        bpath, bstmt = self._resolve_block(block)
        lpath, lnode = self._resolve_loop(loop)
        if not self._is_elementwise(bstmt):
            raise ScheduleError(f"compute_at: block {ir.block_name(bstmt)} is not elementwise")
        cp = self._counterpart(bstmt)
        if cp is None:
            raise ScheduleError(
                f"compute_at: block {bstmt.name} has no unique producer/consumer counterpart")
        cp_name, mode = cp
        cp_path = ir.find_block(self.program.root, cp_name)
        cp_loops = ir.enclosing_loops(self.program.root, cp_path)
        depth = None
        for i, (p, l) in enumerate(cp_loops):
            if l.var == lnode.var:
                depth = i
                break
        if depth is None:
            raise ScheduleError(
                f"compute_at: loop {lnode.var} does not belong to the nest of {cp_name}")
        analysis = self._attach_analysis(bstmt, cp_name, mode, depth)
        if analysis is None:
            raise ScheduleError(
                f"compute_at: dependence violation attaching {bstmt.name} at {lnode.var}")
        boxes, dim_vars = analysis

        # new loops covering the per-iteration box, in buffer-dimension order
        new_vars = []
        mapping: dict[str, ir.Expr] = {}
        loops_to_make = []
        for d, (base, width) in enumerate(boxes):
            v = dim_vars[d]
            if width == 1:
                mapping[v] = _simplify_affine(base)
            else:
                nv = self._fresh_var()
                new_vars.append(nv)
                loops_to_make.append((nv, width))
                mapping[v] = _simplify_affine(BinOp("add", base, Var(nv)))
        new_stmt = ir.substitute_stmt(bstmt, mapping)
        nest: tuple[Stmt, ...] = (new_stmt,)
        for nv, width in reversed(loops_to_make):
            nest = (Loop(nv, width, "serial", nest),)

        # remove the old nest, then re-resolve the counterpart and splice
        old_nest = self._exclusive_nest_path(bpath)
        removed = ir.get_stmt(self.program.root, old_nest)
        old_vars = {s.var for _, s in ir.iter_stmts((removed,)) if isinstance(s, Loop)}
        root = ir.replace_stmt(self.program.root, old_nest, [])
        cp_path = ir.find_block(root, cp_name)
        attach_path = None
        for p, l in ir.enclosing_loops(root, cp_path):
            if l.var == lnode.var:
                attach_path = p
        attach = ir.get_stmt(root, attach_path)
        child_idx = cp_path[len(attach_path)]
        if mode == "at_producer":
            body = attach.body[:child_idx + 1] + nest + attach.body[child_idx + 1:]
        else:
            body = attach.body[:child_idx] + nest + attach.body[child_idx:]
        root = ir.replace_stmt(root, attach_path, [replace(attach, body=body)])
        self._set_program(TensorProgram(self.program.buffers, root))
        self._kill_loops(old_vars)
        self._record("compute_at", [block, loop], {}, [])

    def _inline_mode(self, stmt: Compute) -> Optional[str]:
        if not self._is_elementwise(stmt):
            return None
        buf = self.program.buffer(stmt.buffer)
        readers = self._readers_of(stmt.buffer)
        if buf.role == "intermediate" and len(readers) == 1:
            consumer = ir.get_stmt(self.program.root,
                                   ir.find_block(self.program.root, readers[0]))
            if isinstance(consumer, Compute):
                return "forward"
        produced = []
        for l in ir.collect_loads(stmt.value):
            w = self._writer_of(l.buffer)
            if w is not None and w != stmt.name and (w, l.buffer) not in produced:
                produced.append((w, l.buffer))
        if len(produced) == 1:
            pname, pbuf = produced[0]
            pstmt = ir.get_stmt(self.program.root, ir.find_block(self.program.root, pname))
            if (isinstance(pstmt, Compute)
                    and self.program.buffer(pbuf).role == "intermediate"
                    and self._readers_of(pbuf) == [stmt.name]):
                loads = [l for l in ir.collect_loads(stmt.value) if l.buffer == pbuf]
                if (len(loads) == 1
                        and all(isinstance(i, Var) for i in loads[0].indices)
                        and {i.name for i in loads[0].indices}
                        == {i.name for i in stmt.indices}
                        and len({i.name for i in loads[0].indices}) == len(loads[0].indices)):
                    # chaining onto an existing epilogue requires an identity
                    # read (the prior epilogue's self-loads keep their indices)
                    if pstmt.epilogue is not None and \
                            [i.name for i in loads[0].indices] != \
                            [i.name for i in stmt.indices]:
                        return None
                    return "reverse"
        return None

    def inline(self, block: BlockRef) -> None:
        bpath, bstmt = self._resolve_block(block)
        if not isinstance(bstmt, Compute):
            raise ScheduleError("inline: tensorized blocks cannot be inlined")
        mode = self._inline_mode(bstmt)
        if mode is None:
            raise ScheduleError(
                f"inline: block {ir.block_name(bstmt)} is not inlinable "
                "(must be elementwise with a unique producer or consumer)")
        if mode == "forward":
            self._inline_forward(bpath, bstmt)
        else:
            self._inline_reverse(bpath, bstmt)
        self._kill_blocks({bstmt.name})
        self._record("inline", [block], {}, [])

    def _map_loads(self, e: ir.Expr, buf: str, fn) -> ir.Expr:
        if isinstance(e, (IntConst, Var)):
            return e
        if isinstance(e, Load):
            idx = tuple(self._map_loads(i, buf, fn) for i in e.indices)
            if e.buffer == buf:
                return fn(idx)
            return Load(e.buffer, idx)
        if isinstance(e, BinOp):
            return BinOp(e.op, self._map_loads(e.a, buf, fn), self._map_loads(e.b, buf, fn))
        if isinstance(e, Select):
            return Select(self._map_loads(e.cond, buf, fn),
                          self._map_loads(e.then, buf, fn),
                          self._map_loads(e.other, buf, fn))
        raise TypeError(type(e))

    def _inline_forward(self, bpath, bstmt: Compute) -> None:
        consumer_name = self._readers_of(bstmt.buffer)[0]
        store_vars = [i.name for i in bstmt.indices]

        def splice(idx: tuple[ir.Expr, ...]) -> ir.Expr:
            mapping = {v: idx[d] for d, v in enumerate(store_vars)}
            return ir.substitute(bstmt.value, mapping)

        cpath = ir.find_block(self.program.root, consumer_name)
        cstmt = ir.get_stmt(self.program.root, cpath)
        new_c = replace(
            cstmt,
            value=self._map_loads(cstmt.value, bstmt.buffer, splice),
            init=None if cstmt.init is None else self._map_loads(cstmt.init, bstmt.buffer, splice),
            epilogue=None if cstmt.epilogue is None
            else self._map_loads(cstmt.epilogue, bstmt.buffer, splice),
        )
        nest = self._exclusive_nest_path(bpath)
        removed = ir.get_stmt(self.program.root, nest)
        old_vars = {s.var for _, s in ir.iter_stmts((removed,)) if isinstance(s, Loop)}
        root = ir.replace_stmt(self.program.root, cpath, [new_c])
        root = ir.replace_stmt(root, nest, [])
        buffers = tuple(b for b in self.program.buffers if b.name != bstmt.buffer)
        self._set_program(TensorProgram(buffers, root))
        self._kill_loops(old_vars)

    def _inline_reverse(self, bpath, bstmt: Compute) -> None:
        pbuf_load = [l for l in ir.collect_loads(bstmt.value)
                     if self._writer_of(l.buffer) not in (None, bstmt.name)][0]
        pbuf = pbuf_load.buffer
        pname = self._writer_of(pbuf)
        ppath = ir.find_block(self.program.root, pname)
        pstmt = ir.get_stmt(self.program.root, ppath)

        # bp dim d is indexed by consumer var g[d]; producer writes bp at s;
        # the rewritten producer stores into the consumer's output buffer at
        # s permuted through g into the consumer's store order.
        g = [i.name for i in pbuf_load.indices]
        new_indices = tuple(pstmt.indices[g.index(i.name)] for i in bstmt.indices)

        # consumer expression with its vars replaced by producer-side indices
        var_map = {v: pstmt.indices[d] for d, v in enumerate(g)}
        acc_load = Load(bstmt.buffer, new_indices)

        def as_producer_expr(replacement: ir.Expr) -> ir.Expr:
            e = ir.substitute(bstmt.value, {v: var_map[v] for v in var_map})
            return self._map_loads(e, pbuf, lambda idx: replacement)

        if pstmt.init is None:
            new_p = replace(pstmt, buffer=bstmt.buffer, indices=new_indices,
                            value=as_producer_expr(pstmt.value))
        else:
            if pstmt.epilogue is not None:
                prev = ir.rename_loads(pstmt.epilogue, pbuf, bstmt.buffer)
                composed = as_producer_expr(prev)
            else:
                composed = as_producer_expr(acc_load)
            new_p = replace(pstmt, buffer=bstmt.buffer, indices=new_indices,
                            value=ir.rename_loads(pstmt.value, pbuf, bstmt.buffer),
                            init=ir.rename_loads(pstmt.init, pbuf, bstmt.buffer),
                            epilogue=composed)
        nest = self._exclusive_nest_path(bpath)
        removed = ir.get_stmt(self.program.root, nest)
        old_vars = {s.var for _, s in ir.iter_stmts((removed,)) if isinstance(s, Loop)}
        root = ir.replace_stmt(self.program.root, ppath, [new_p])
        root = ir.replace_stmt(root, nest, [])
        buffers = tuple(b for b in self.program.buffers if b.name != pbuf)
        self._set_program(TensorProgram(buffers, root))
        self._kill_loops(old_vars)

    # -- tensorize ------------------------------------------------------------

    def tensorize(self, loop: LoopRef, intrinsic: str) -> None:
        if intrinsic not in INTRINSICS:
            raise ScheduleError(f"unknown intrinsic {intrinsic!r}")
        info = INTRINSICS[intrinsic]
        path, node = self._resolve_loop(loop)

        nest = []
        cur: Stmt = node
        for level, want in enumerate(info.tile):
            if not isinstance(cur, Loop):
                raise ScheduleError(
                    f"tensorize: expected a {len(info.tile)}-deep loop nest, "
                    f"found a {type(cur).__name__} at level {level}")
            if cur.extent != want:
                raise ScheduleError(
                    f"tensorize: loop {cur.var} has extent {cur.extent}, expected {want}")
            if len(cur.body) != 1:
                raise ScheduleError(
                    f"tensorize: loop {cur.var} must have a single statement body")
            nest.append(cur)
            cur = cur.body[0]
        if not isinstance(cur, Compute):
            raise ScheduleError("tensorize: innermost statement must be a compute")
        if cur.init is None:
            raise ScheduleError("tensorize: expected a reduction compute (with init)")
        if cur.epilogue is not None:
            raise ScheduleError("tensorize: compute with an epilogue cannot be tensorized")
        a_var, b_var, c_var = nest[0].var, nest[1].var, nest[2].var
        tile_vars = (a_var, b_var, c_var)
        if ir.expr_vars(cur.init) & set(tile_vars):
            raise ScheduleError("tensorize: init must not depend on the tile loops")
        if not (isinstance(cur.value, BinOp) and cur.value.op == "mul"
                and isinstance(cur.value.a, Load) and isinstance(cur.value.b, Load)):
            raise ScheduleError("tensorize: body must be a product of two loads")

        def coeff_pattern(e: ir.Expr, wanted: Optional[str]) -> ir.Expr:
            dec = ir.affine_coeffs(e)
            if dec is None:
                raise ScheduleError("tensorize: non-affine index in the tile body")
            coeffs, _ = dec
            for v in tile_vars:
                want_c = 1 if v == wanted else 0
                if coeffs.get(v, 0) != want_c:
                    raise ScheduleError(
                        f"tensorize: index {ir._expr_str(e)} must have coefficient "
                        f"{want_c} on {v}")
            return _simplify_affine(ir.substitute(e, {v: IntConst(0) for v in tile_vars}))

        if len(cur.indices) != 2:
            raise ScheduleError("tensorize: output must be 2-dimensional")
        c_base = (coeff_pattern(cur.indices[0], a_var), coeff_pattern(cur.indices[1], b_var))

        loads = [cur.value.a, cur.value.b]
        if any(len(l.indices) != 2 for l in loads):
            raise ScheduleError("tensorize: operands must be 2-dimensional loads")
        a_load = next((l for l in loads if a_var in ir.expr_vars(l)), None)
        b_load = next((l for l in loads if l is not a_load), None)
        if a_load is None or b_load is None:
            raise ScheduleError("tensorize: could not match operand loads to the "
                                "output row index")
        a_base = (coeff_pattern(a_load.indices[0], a_var),
                  coeff_pattern(a_load.indices[1], c_var))
        b_base = (coeff_pattern(b_load.indices[0], c_var),
                  coeff_pattern(b_load.indices[1], b_var))

        new_stmt = Intrinsic(intrinsic, cur.name,
                             ((cur.buffer, c_base), (a_load.buffer, a_base),
                              (b_load.buffer, b_base)),
                             init=cur.init)
        self._set_program(TensorProgram(
            self.program.buffers, ir.replace_stmt(self.program.root, path, [new_stmt])))
        self._kill_loops(set(tile_vars))
        self._record("tensorize", [loop], {"intrinsic": intrinsic}, [])

    # -- sampling --------------------------------------------------------------

    def sample_perfect_tile(self, loop: LoopRef, n: int,
                            _decision: Optional[Sequence[int]] = None) -> list[RandomVarRef]:
        if n < 1:
            raise ScheduleError("sample_perfect_tile: n must be >= 1")
        _, node = self._resolve_loop(loop)
        domain = ordered_factorizations(node.extent, n)
        if _decision is not None:
            tile = tuple(int(x) for x in _decision)
            if len(tile) != n or any(f < 1 for f in tile) or _prod(tile) != node.extent:
                raise ScheduleError(
                    f"sample_perfect_tile: decision {list(tile)} is not a perfect "
                    f"{n}-way factorization of {node.extent}")
        else:
            tile = domain[self._draw_index(len(domain))]
        refs = [self._new_ref(RandomVarRef, ("int", f)) for f in tile]
        self._record("sample_perfect_tile", [loop],
                     {"n": n, "extent": node.extent}, refs,
                     decision={"tile": list(tile), "size": len(domain)})
        return refs

    def sample_categorical(self, candidates: Sequence, probs: Sequence[float],
                           _decision: Optional[int] = None) -> RandomVarRef:
        if len(candidates) != len(probs):
            raise ScheduleError("sample_categorical: length mismatch")
        if any(w < 0 for w in probs):
            raise ScheduleError("sample_categorical: negative weight")
        total = float(sum(probs))
        if total <= 0:
            raise ScheduleError("sample_categorical: all-zero weights")
        if _decision is not None:
            idx = int(_decision)
            if not (0 <= idx < len(candidates)) or probs[idx] <= 0:
                raise ScheduleError(f"sample_categorical: decision {idx} out of domain")
        else:
            idx = self._draw_index(len(candidates), probs)
        ref = self._new_ref(RandomVarRef, ("int", candidates[idx]))
        self._record("sample_categorical", [],
                     {"candidates": list(candidates), "probs": [float(w) for w in probs]},
                     [ref], decision={"index": idx, "prob": float(probs[idx]) / total,
                                      "size": len(candidates)})
        return ref

    def can_sample_compute_location(self, block: BlockRef) -> bool:
        if not self.block_exists(block):
            return False
        _, bstmt = self._resolve_block(block)
        if not isinstance(bstmt, Compute) or not self._is_elementwise(bstmt):
            return False
        return self._counterpart(bstmt) is not None

    def compute_location_domain(self, block: BlockRef) -> list:
        """Location tokens for ``block`` against the current program:
        'root', 'inline' when legal, then eligible counterpart loops
        outermost-first."""
        _, bstmt = self._resolve_block(block)
        if not isinstance(bstmt, Compute) or not self._is_elementwise(bstmt):
            raise ScheduleError(f"sample_compute_location: block "
                                f"{ir.block_name(bstmt)} is not eligible")
        cand = self._attach_candidates(bstmt)
        if cand is None:
            raise ScheduleError(
                f"sample_compute_location: block {bstmt.name} has no counterpart")
        _, _, loops = cand
        domain: list = ["root"]
        if self._inline_mode(bstmt) is not None:
            domain.append("inline")
        domain.extend(("loop", v) for v in loops)
        return domain

    def sample_compute_location(self, block: BlockRef,
                                _decision: Optional[int] = None) -> RandomVarRef:
        domain = self.compute_location_domain(block)
        if _decision is not None:
            idx = int(_decision)
            if not 0 <= idx < len(domain):
                raise ScheduleError(
                    f"sample_compute_location: decision {idx} outside domain of "
                    f"size {len(domain)}")
        else:
            idx = self._draw_index(len(domain))
        token = domain[idx]
        ref = self._new_ref(RandomVarRef, ("loc", token))
        self._record("sample_compute_location", [block], {}, [ref],
                     decision={"index": idx, "size": len(domain)})
        return ref
