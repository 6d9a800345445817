"""Composable transformation modules and design-space generation.

A transformation module bundles program analysis, sampling, and schedule
primitives behind an applicability predicate. Modules compose: the composed
module visits every block once in pre-order and draws (as a traced
categorical decision) which applicable module to apply there, so module
choice is itself searchable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import ir
from .ir import Compute, Loop, TensorProgram, Var
from .schedule import BlockRef, ScheduleError, ScheduleState
from .trace import Trace


class TransformationModule:
    """Base: named analysis + sampling + transformation procedure."""

    name = "module"

    def applicability(self, state: ScheduleState, block: BlockRef) -> bool:
        raise NotImplementedError

    def apply(self, state: ScheduleState, block: BlockRef) -> None:
        raise NotImplementedError

    def apply_program(self, state: ScheduleState) -> None:
        """Deterministic whole-program application: visit each block once and
        apply wherever applicable."""
        for b in state.get_blocks():
            if state.block_exists(b) and self.applicability(state, b):
                self.apply(state, b)

    def __repr__(self):
        return f"<{self.name}>"


# ---------------------------------------------------------------------------
# Analysis helpers (host-side; only primitive calls are traced)
# ---------------------------------------------------------------------------

def _block_stmt(state: ScheduleState, block: BlockRef):
    path = ir.find_block(state.program.root, block.payload)
    return path, ir.get_stmt(state.program.root, path)


def _exclusive_chain(state: ScheduleState, block: BlockRef) -> bool:
    """True when every loop enclosing the block holds exactly one statement,
    i.e. the block's nest is a perfect exclusive chain."""
    path, _ = _block_stmt(state, block)
    for lp, loop in ir.enclosing_loops(state.program.root, path):
        if len(loop.body) != 1:
            return False
    return True


def _classify_loops(state: ScheduleState, block: BlockRef):
    """(spatial vars, reduction vars) in nest order, or None when some loop
    is neither (absent or mixed use)."""
    path, stmt = _block_stmt(state, block)
    loops = [l for _, l in ir.enclosing_loops(state.program.root, path)]
    spatial, reduction = [], []
    for loop in loops:
        in_store, red = ScheduleState._block_var_use(stmt, loop.var)
        if red:
            reduction.append(loop.var)
        elif in_store:
            spatial.append(loop.var)
        else:
            return None
    return spatial, reduction


# ---------------------------------------------------------------------------
# Multi-level tiling
# ---------------------------------------------------------------------------

class _MultiLevelTiling(TransformationModule):
    def __init__(self, structure: str):
        if len(structure) < 2:
            raise ValueError("tile structure needs at least two bands")
        if any(ch not in "SR" for ch in structure):
            raise ValueError("tile structure must be a string over {S, R}")
        if "S" not in structure or "R" not in structure:
            raise ValueError("tile structure needs at least one S and one R band")
        self.structure = structure
        self.name = f"mlt({structure})"

    def applicability(self, state, block):
        if not state.block_exists(block):
            return False
        _, stmt = _block_stmt(state, block)
        if isinstance(stmt, Compute) and stmt.init is None:
            return False
        if not _exclusive_chain(state, block):
            return False
        cls = _classify_loops(state, block)
        return cls is not None and bool(cls[0]) and bool(cls[1])

    def apply(self, state, block):
        spatial_vars, reduction_vars = _classify_loops(state, block)
        n_s = self.structure.count("S")
        n_r = self.structure.count("R")
        loops = state.get_loops(block)
        by_var = {state._resolve_loop(l)[1].var: l for l in loops}
        parts: dict[str, list] = {}
        for v in spatial_vars + reduction_vars:
            n = n_s if v in spatial_vars else n_r
            tile = state.sample_perfect_tile(by_var[v], n)
            parts[v] = state.split(by_var[v], tile)
        order = []
        s_band = r_band = 0
        for ch in self.structure:
            if ch == "S":
                order.extend(parts[v][s_band] for v in spatial_vars)
                s_band += 1
            else:
                order.extend(parts[v][r_band] for v in reduction_vars)
                r_band += 1
        state.reorder(order)


def multi_level_tiling(structure: str) -> TransformationModule:
    """Tiling module: splits every spatial loop into one part per S band and
    every reduction loop into one part per R band, then reorders band-major
    (e.g. "SSRSR" builds a five-band nest)."""
    return _MultiLevelTiling(structure)


# ---------------------------------------------------------------------------
# Auto-inline / compute-location
# ---------------------------------------------------------------------------

class _AutoInline(TransformationModule):
    name = "auto_inline"

    def applicability(self, state, block):
        return state.can_sample_compute_location(block)

    def apply(self, state, block):
        loc = state.sample_compute_location(block)
        token = state.value_of(loc)
        if token == "root":
            return
        if token == "inline":
            state.inline(block)
        else:
            state.compute_at(block, loc)


def auto_inline() -> TransformationModule:
    """Samples a compute location for elementwise blocks and dispatches to
    inline / compute_at / no-op."""
    return _AutoInline()


# ---------------------------------------------------------------------------
# Parallelize-vectorize-unroll
# ---------------------------------------------------------------------------

class _ParallelizeVectorizeUnroll(TransformationModule):
    def __init__(self, max_parallel_extent=256, vector_widths=(4, 8),
                 unroll_depths=(0, 16)):
        self.max_parallel_extent = int(max_parallel_extent)
        self.vector_widths = tuple(int(w) for w in vector_widths)
        self.unroll_depths = tuple(int(d) for d in unroll_depths)
        self.name = "pvu"

    def applicability(self, state, block):
        return state.block_exists(block)

    def _loops_of(self, state, block):
        refs = state.get_loops(block)
        return [(r, *state._resolve_loop(r)) for r in refs]

    def apply(self, state, block):
        # 1. fuse the leading data-parallel loops up to the parallel budget
        loops = self._loops_of(state, block)
        prefix = []
        product = 1
        for idx, (r, path, node) in enumerate(loops):
            if state._loop_role(node) != "parallel":
                break
            if idx > 0 and len(loops[idx - 1][2].body) != 1:
                break  # not perfectly nested under the previous prefix loop
            if prefix and product * node.extent > self.max_parallel_extent:
                break
            prefix.append(r)
            product *= node.extent
        if prefix:
            try:
                state.fuse(prefix)
            except ScheduleError:
                pass

        # 2. split the innermost data-parallel loop by a sampled width and
        # vectorize the inner part (only when it is innermost overall)
        loops = self._loops_of(state, block)
        target = None
        for r, path, node in loops:
            if state._loop_role(node) == "parallel" and not any(
                    isinstance(s, Loop) for _, s in ir.iter_stmts(node.body)):
                target = (r, node)
        if target is not None and target[1].extent > 1:
            feasible = [w for w in self.vector_widths if target[1].extent % w == 0]
            if feasible:
                w_ref = state.sample_categorical(feasible, [1.0] * len(feasible))
                w = state.value_of(w_ref)
                if w > 1:
                    outer, inner = state.split(target[0], [target[1].extent // w, w_ref])
                    try:
                        state.vectorize(inner)
                    except ScheduleError:
                        pass

        # 3. parallelize the outermost data-parallel loop
        loops = self._loops_of(state, block)
        if loops:
            r, _, node = loops[0]
            if node.kind == "serial" and state._loop_role(node) == "parallel":
                try:
                    state.parallelize(r)
                except ScheduleError:
                    pass

        # 4. sample an unroll depth for the innermost remaining serial loop
        loops = self._loops_of(state, block)
        serial = [(r, n) for r, _, n in loops if n.kind == "serial"]
        if serial and self.unroll_depths:
            d_ref = state.sample_categorical(list(self.unroll_depths),
                                             [1.0] * len(self.unroll_depths))
            d = state.value_of(d_ref)
            r, node = serial[-1]
            if d > 0 and node.extent <= min(d, 64):
                try:
                    state.unroll(r)
                except ScheduleError:
                    pass


def parallelize_vectorize_unroll(max_parallel_extent=256, vector_widths=(4, 8),
                                 unroll_depths=(0, 16)) -> TransformationModule:
    return _ParallelizeVectorizeUnroll(max_parallel_extent, vector_widths, unroll_depths)


# ---------------------------------------------------------------------------
# Tensor-unit targeting
# ---------------------------------------------------------------------------

class _UseTensorUnit(TransformationModule):
    name = "use_tensor_unit"

    def applicability(self, state, block):
        if not state.block_exists(block):
            return False
        path, stmt = _block_stmt(state, block)
        if not isinstance(stmt, Compute) or stmt.init is None or stmt.epilogue is not None:
            return False
        if not _exclusive_chain(state, block):
            return False
        loops = [l for _, l in ir.enclosing_loops(state.program.root, path)]
        if len(loops) != 3 or any(l.extent % 4 != 0 for l in loops):
            return False
        if any(l.kind != "serial" for l in loops):
            return False
        v = stmt.value
        if not (isinstance(v, ir.BinOp) and v.op == "mul"
                and isinstance(v.a, ir.Load) and isinstance(v.b, ir.Load)):
            return False
        if len(stmt.indices) != 2 or not all(isinstance(i, Var) for i in stmt.indices):
            return False
        if any(len(l.indices) != 2 or not all(isinstance(i, Var) for i in l.indices)
               for l in (v.a, v.b)):
            return False
        i_var, j_var = (i.name for i in stmt.indices)
        pats = {(v.a.indices[0].name, v.a.indices[1].name),
                (v.b.indices[0].name, v.b.indices[1].name)}
        k_vars = {n for p in pats for n in p} - {i_var, j_var}
        if len(k_vars) != 1:
            return False
        k_var = next(iter(k_vars))
        return pats == {(i_var, k_var), (k_var, j_var)}

    def apply(self, state, block):
        path, stmt = _block_stmt(state, block)
        i_var, j_var = (i.name for i in stmt.indices)
        loops = state.get_loops(block)
        by_var = {state._resolve_loop(l)[1].var: l for l in loops}
        nest_order = [state._resolve_loop(l)[1].var for l in loops]
        k_var = next(v for v in nest_order if v not in (i_var, j_var))

        outer, mid, tile = [], [], []
        for v in (i_var, j_var, k_var):
            ref = by_var[v]
            extent = state._resolve_loop(ref)[1].extent
            big, t4 = state.split(ref, [extent // 4, 4])
            ab = state.sample_perfect_tile(big, 2)
            a_ref, b_ref = state.split(big, ab)
            outer.append(a_ref)
            mid.append(b_ref)
            tile.append(t4)
        state.reorder(outer + mid + tile)
        state.tensorize(tile[0], "tu.mma4")


def use_tensor_unit() -> TransformationModule:
    """Tiles a matmul-shaped reduction so a 4x4x4 inner tile exists, then
    tensorizes it; inapplicable unless all three extents divide by 4."""
    return _UseTensorUnit()


# ---------------------------------------------------------------------------
# Stochastic composition
# ---------------------------------------------------------------------------

class _Composed(TransformationModule):
    def __init__(self, modules):
        if not modules:
            raise ValueError("compose needs at least one module")
        self.modules = list(modules)
        self.name = "compose(" + ",".join(m.name for m in modules) + ")"

    def applicability(self, state, block):
        return any(m.applicability(state, block) for m in self.modules)

    def apply(self, state, block):
        applicable = [m for m in self.modules if m.applicability(state, block)]
        if not applicable:
            return
        snap = state.snapshot()
        choice = state.sample_categorical([m.name for m in applicable],
                                          [1.0] * len(applicable))
        module = next(m for m in applicable if m.name == state.value_of(choice))
        try:
            module.apply(state, block)
        except ScheduleError:
            # a failed application leaves no mark: program, trace, and
            # handles roll back to before the module-choice draw
            state.restore(snap)

    def apply_program(self, state):
        queue = list(state.get_blocks())
        visited = set()
        while queue:
            block = queue.pop(0)
            visited.add(block.payload)
            if not state.block_exists(block):
                continue
            before = set(state.program.block_paths())
            self.apply(state, block)
            created = set(state.program.block_paths()) - before
            if created:
                queue.extend(b for b in state.get_blocks()
                             if b.payload in created and b.payload not in visited)


def compose(modules) -> TransformationModule:
    """One module whose application visits each block once (pre-order,
    appending newly created blocks) and draws one applicable module per
    block via a traced uniform categorical."""
    return _Composed(modules)


# ---------------------------------------------------------------------------
# Design spaces
# ---------------------------------------------------------------------------

@dataclass
class DesignSpace:
    workload: TensorProgram
    generator: TransformationModule
    traces: list[Trace] = field(default_factory=list)


def run_generator(e0: TensorProgram, generator: TransformationModule,
                  seed: int) -> tuple[TensorProgram, Trace]:
    """One stochastic execution of the generator from a fresh state."""
    state = ScheduleState(e0, seed=seed)
    generator.apply_program(state)
    return state.program, state.trace()


def sample_traces(e0, generator, k: int, seed: int) -> list[tuple[TensorProgram, Trace]]:
    rng = random.Random(seed)
    return [run_generator(e0, generator, rng.randrange(2 ** 62)) for _ in range(k)]


def generate_space(e0, generator, k: int, seed: int) -> DesignSpace:
    """Run the generator k times, de-duplicating by final-program structural
    hash; every stored trace replays against the workload by construction."""
    seen = {}
    for program, trace in sample_traces(e0, generator, k, seed):
        h = ir.structural_hash(program)
        if h not in seen:
            seen[h] = trace
    return DesignSpace(e0, generator, list(seen.values()))


class _ChoiceScript:
    """Scripted decision source: follows a fixed index prefix, then takes the
    first valid choice, logging every domain size for DFS branching."""

    def __init__(self, script):
        self.script = list(script)
        self.pos = 0
        self.log: list[int] = []

    def draw(self, size: int, probs=None) -> int:
        valid = [i for i in range(size) if probs is None or probs[i] > 0]
        pick = self.script[self.pos] if self.pos < len(self.script) else 0
        self.log.append(len(valid))
        self.pos += 1
        return valid[pick]

    def state(self):
        return self.pos

    def restore(self, s):
        self.pos = s
        del self.log[s:]


@dataclass
class EnumeratedSpace:
    traces: list[Trace]
    program_hashes: list[int]
    capped: bool

    def distinct_hashes(self) -> set[int]:
        return set(self.program_hashes)


def enumerate_space(e0, generator, cap: int) -> EnumeratedSpace:
    """Depth-first enumeration over every decision combination (domains are
    recomputed state-dependently). Stops with ``capped`` set once ``cap``
    distinct final programs have been found."""
    if cap < 1:
        raise ValueError("cap must be positive")
    traces, hashes = [], []
    seen: set[int] = set()
    stack: list[list[int]] = [[]]
    capped = False
    while stack:
        script = stack.pop()
        hook = _ChoiceScript(script)
        state = ScheduleState(e0, seed=0)
        state.choice_hook = hook
        generator.apply_program(state)
        traces.append(state.trace())
        h = ir.structural_hash(state.program)
        hashes.append(h)
        seen.add(h)
        if len(seen) >= cap:
            capped = True
            break
        for j in range(len(hook.log) - 1, len(script) - 1, -1):
            prefix = script + [0] * (j - len(script))
            for alt in range(hook.log[j] - 1, 0, -1):
                stack.append(prefix + [alt])
    return EnumeratedSpace(traces, hashes, capped)


# ---------------------------------------------------------------------------
# Space configuration files
# ---------------------------------------------------------------------------

def default_space_config() -> dict:
    return {"modules": [{"mlt": {"structure": "SSRSR"}},
                        {"auto_inline": {}},
                        {"pvu": {"widths": [4, 8]}}]}


def space_from_config(doc: dict) -> TransformationModule:
    """Build a composed module from a config document:
    {"modules": [{"mlt": {"structure": ...}}, {"auto_inline": {}},
                 {"pvu": {"widths": [...], "max_parallel": ..., "unroll_depths": [...]}},
                 {"tensor_unit": {}}]}
    """
    if not isinstance(doc, dict) or "modules" not in doc:
        raise ValueError("space config must be an object with a 'modules' list")
    modules = []
    for i, entry in enumerate(doc["modules"]):
        if not isinstance(entry, dict) or len(entry) != 1:
            raise ValueError(f"modules[{i}]: expected a single-key object")
        kind, params = next(iter(entry.items()))
        params = params or {}
        if kind == "mlt":
            modules.append(multi_level_tiling(params.get("structure", "SSRSR")))
        elif kind == "auto_inline":
            modules.append(auto_inline())
        elif kind == "pvu":
            modules.append(parallelize_vectorize_unroll(
                max_parallel_extent=params.get("max_parallel", 256),
                vector_widths=params.get("widths", (4, 8)),
                unroll_depths=params.get("unroll_depths", (0, 16))))
        elif kind == "tensor_unit":
            modules.append(use_tensor_unit())
        else:
            raise ValueError(f"modules[{i}]: unknown module kind {kind!r}")
    return compose(modules)


def default_space() -> TransformationModule:
    return space_from_config(default_space_config())
