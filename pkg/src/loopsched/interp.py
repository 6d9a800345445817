"""Reference execution of tensor programs over concrete int64 tensors.

Two engines share one semantics (sequential nested-loop execution; loop kind
annotations never change results):

* ``run`` evaluates statement-by-statement with numpy over the whole
  iteration grid. It is exact for validated programs (single writer per
  buffer element, acyclic block dependences, dependence-correct placement,
  which every schedule primitive preserves) and fast enough to equivalence-
  check thousands of desk-scale programs.
* ``run_reference`` walks the loop tree one iteration at a time. It is the
  independent oracle used to cross-check ``run`` and to vet transformation
  preconditions at small shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ir
from .ir import (BinOp, Compute, IntConst, Intrinsic, Load, Loop, Select,
                 Stmt, TensorProgram, Var)


@dataclass
class TensorValue:
    shape: tuple[int, ...]
    data: np.ndarray  # int64, row-major, len == prod(shape)

    @classmethod
    def from_array(cls, arr) -> "TensorValue":
        a = np.ascontiguousarray(arr, dtype=np.int64)
        return cls(tuple(a.shape), a.reshape(-1))

    def as_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


class ExecutionError(RuntimeError):
    pass


class OutOfBoundsError(ExecutionError):
    def __init__(self, buffer: str, dim: int, index, extent: int, where: str):
        self.buffer = buffer
        self.index = index
        super().__init__(
            f"out-of-bounds access to {buffer} dim {dim}: index {index} "
            f"not in [0, {extent}) in {where}")


def random_inputs(p: TensorProgram, seed: int) -> dict[str, TensorValue]:
    """Deterministic per seed; values uniform in [-8, 8] so integer matmul
    accumulations stay far from int64 overflow at desk shapes."""
    rng = np.random.default_rng(seed)
    out = {}
    for b in p.buffers:
        if b.role == "input":
            arr = rng.integers(-8, 9, size=b.shape, dtype=np.int64)
            out[b.name] = TensorValue.from_array(arr)
    return out


def _check_inputs(p: TensorProgram, inputs: dict[str, TensorValue]) -> None:
    for b in p.buffers:
        if b.role != "input":
            continue
        if b.name not in inputs:
            raise ExecutionError(f"missing input tensor {b.name!r}")
        if tuple(inputs[b.name].shape) != b.shape:
            raise ExecutionError(
                f"input {b.name!r} has shape {tuple(inputs[b.name].shape)}, "
                f"declared {b.shape}")


# ---------------------------------------------------------------------------
# Vectorized engine
# ---------------------------------------------------------------------------

def _grid(extents: list[int]) -> dict:
    """Broadcastable index arrays, one axis per loop."""
    n = len(extents)
    grids = []
    for axis, e in enumerate(extents):
        shape = [1] * n
        shape[axis] = e
        grids.append(np.arange(e, dtype=np.int64).reshape(shape))
    return grids


class _VecEnv:
    def __init__(self, buffers, written, var_arrays, where):
        self.buffers = buffers          # name -> ndarray (shaped)
        self.written = written          # name -> bool ndarray or None (inputs)
        self.vars = var_arrays          # var name -> broadcastable ndarray
        self.where = where


def _vec_eval(e, env: _VecEnv, active):
    if isinstance(e, IntConst):
        return np.int64(e.value)
    if isinstance(e, Var):
        return env.vars[e.name]
    if isinstance(e, BinOp):
        a = _vec_eval(e.a, env, active)
        b = _vec_eval(e.b, env, active)
        if e.op == "add":
            return a + b
        if e.op == "sub":
            return a - b
        if e.op == "mul":
            return a * b
        if e.op == "max":
            return np.maximum(a, b)
        if e.op == "min":
            return np.minimum(a, b)
        if e.op == "floordiv":
            return a // b
        if e.op == "mod":
            return a % b
        raise TypeError(e.op)
    if isinstance(e, Select):
        c = _vec_eval(e.cond, env, active)
        mask = c != 0
        t_active = mask if active is None else (active & mask)
        o_active = ~mask if active is None else (active & ~mask)
        t = _vec_eval(e.then, env, t_active)
        o = _vec_eval(e.other, env, o_active)
        return np.where(mask, t, o)
    if isinstance(e, Load):
        return _vec_load(e, env, active)
    raise TypeError(type(e))


def _first_offender(iv, oob) -> int:
    shape = np.broadcast_shapes(np.shape(iv), np.shape(oob))
    if not shape:
        return int(iv)
    ivb = np.broadcast_to(np.asarray(iv), shape)
    oobb = np.broadcast_to(np.asarray(oob), shape)
    return int(ivb[oobb].flat[0])


def _vec_load(e: Load, env: _VecEnv, active):
    arr = env.buffers[e.buffer]
    idx = []
    for d, iexpr in enumerate(e.indices):
        iv = _vec_eval(iexpr, env, active)
        extent = arr.shape[d]
        oob = (iv < 0) | (iv >= extent)
        if active is not None:
            oob = oob & active
        if np.any(oob):
            raise OutOfBoundsError(e.buffer, d, _first_offender(iv, oob), extent, env.where)
        idx.append(np.clip(iv, 0, extent - 1))
    mask = env.written.get(e.buffer)
    if mask is not None:
        got = mask[tuple(idx)]
        ok = got if active is None else (got | ~active)
        if not np.all(ok):
            raise ExecutionError(
                f"read of {e.buffer} before it is written, in {env.where}")
    return arr[tuple(idx)]


def _store_indices(indices, env, extents_shape, where, arr, buffer_name):
    idx = []
    for d, iexpr in enumerate(indices):
        iv = _vec_eval(iexpr, env, None)
        extent = arr.shape[d]
        oob = (iv < 0) | (iv >= extent)
        if np.any(oob):
            raise OutOfBoundsError(buffer_name, d, _first_offender(iv, oob), extent, where)
        idx.append(np.broadcast_to(iv, extents_shape))
    return tuple(idx)


class _NeedsReference(Exception):
    pass


def _exec_compute_vec(stmt: Compute, loops, buffers, written):
    loop_vars = [l.var for l in loops]
    used = set()
    for e in ir.stmt_exprs(stmt):
        used |= ir.expr_vars(e)
    red = ir.reduction_vars(stmt, loop_vars)

    if stmt.init is not None and any(l.var not in used for l in loops):
        # Absent loop vars around a reduction repeat its accumulation; the
        # grid engine cannot express that ordering, so signal a fallback.
        raise _NeedsReference()

    if stmt.init is None:
        loops = [l for l in loops if l.var in used]
        loop_vars = [l.var for l in loops]

    extents = [l.extent for l in loops]
    grids = _grid(extents)
    var_arrays = dict(zip(loop_vars, grids))
    shape = tuple(extents)
    env = _VecEnv(buffers, written, var_arrays, f"block {stmt.name}")
    arr = buffers[stmt.buffer]

    if stmt.init is None:
        vals = np.broadcast_to(np.asarray(_vec_eval(stmt.value, env, None)), shape)
        idx = _store_indices(stmt.indices, env, shape, env.where, arr, stmt.buffer)
        arr[idx] = vals
        if written.get(stmt.buffer) is not None:
            written[stmt.buffer][idx] = True
        return

    # Reduction: init on the first reduction iteration, accumulate over all,
    # epilogue on the last. Integer addition makes accumulation order moot.
    red_axes = {loop_vars.index(v) for v in red}

    def sub_env(fixed):
        sub_vars = {}
        for i, v in enumerate(loop_vars):
            sub_vars[v] = np.int64(fixed(i)) if i in red_axes else grids[i]
        return _VecEnv(buffers, written, sub_vars, f"block {stmt.name}")

    # full-rank shapes with the reduction axes collapsed to 1
    sub_shape = tuple(1 if i in red_axes else e for i, e in enumerate(extents))
    env0 = sub_env(lambda i: 0)
    init_vals = np.broadcast_to(np.asarray(_vec_eval(stmt.init, env0, None)), sub_shape)
    idx0 = _store_indices(stmt.indices, env0, sub_shape, env.where, arr, stmt.buffer)
    arr[idx0] = init_vals
    if written.get(stmt.buffer) is not None:
        written[stmt.buffer][idx0] = True

    vals = np.broadcast_to(np.asarray(_vec_eval(stmt.value, env, None)), shape)
    idx = _store_indices(stmt.indices, env, shape, env.where, arr, stmt.buffer)
    np.add.at(arr, idx, vals)

    if stmt.epilogue is not None:
        env_last = sub_env(lambda i: extents[i] - 1)
        epi = np.broadcast_to(np.asarray(_vec_eval(stmt.epilogue, env_last, None)),
                              sub_shape)
        idx_last = _store_indices(stmt.indices, env_last, sub_shape, env.where,
                                  arr, stmt.buffer)
        arr[idx_last] = epi


def _mma4_bases(stmt: Intrinsic, env: _VecEnv, buffers, where):
    """Evaluate and bounds-check the three 2-d operand base indices."""
    out = []
    for buf, idx in stmt.operands:
        arr = buffers[buf]
        base = []
        for d, iexpr in enumerate(idx):
            iv = np.asarray(_vec_eval(iexpr, env, None))
            extent = arr.shape[d]
            oob = (iv < 0) | (iv + 3 >= extent)
            if np.any(oob):
                raise OutOfBoundsError(buf, d, _first_offender(iv, oob) + 3, extent, where)
            base.append(iv)
        out.append((arr, base))
    return out


def _exec_intrinsic_vec(stmt: Intrinsic, loops, buffers, written):
    if stmt.name != "tu.mma4":
        raise ExecutionError(f"unknown intrinsic {stmt.name!r}")
    where = f"intrinsic {stmt.block}"
    loop_vars = [l.var for l in loops]
    extents = [l.extent for l in loops]
    grids = _grid(extents)
    env = _VecEnv(buffers, written, dict(zip(loop_vars, grids)), where)
    red = set(ir.intrinsic_reduction_vars(stmt, loop_vars))
    red_axes = {i for i, v in enumerate(loop_vars) if v in red}

    (carr, (ci, cj)), (aarr, (ai, ak)), (barr, (bk, bj)) = _mma4_bases(
        stmt, env, buffers, where)
    cmask = written.get(stmt.operands[0][0])

    if stmt.init is not None:
        sub_vars = {v: (np.int64(0) if i in red_axes else grids[i])
                    for i, v in enumerate(loop_vars)}
        env0 = _VecEnv(buffers, written, sub_vars, where)
        (carr0, (ci0, cj0)), _, _ = _mma4_bases(stmt, env0, buffers, where)
        init_val = np.asarray(_vec_eval(stmt.init, env0, None))
        for di in range(4):
            for dj in range(4):
                carr0[ci0 + di, cj0 + dj] = init_val
                if cmask is not None:
                    cmask[ci0 + di, cj0 + dj] = True

    for buf, mask_arr, rows, cols in ((stmt.operands[1][0], aarr, ai, ak),
                                      (stmt.operands[2][0], barr, bk, bj)):
        m = written.get(buf)
        if m is not None and not (np.all(m[rows, cols]) and np.all(m[rows + 3, cols + 3])):
            raise ExecutionError(f"read of {buf} before it is written, in {where}")

    # C's base never depends on the reduction loops (tensorize pattern), so
    # contributions along those grid axes collapse into one scatter each.
    red_tuple = tuple(sorted(red_axes))
    for di in range(4):
        for dj in range(4):
            acc = None
            for dk in range(4):
                prod = aarr[ai + di, ak + dk] * barr[bk + dk, bj + dj]
                acc = prod if acc is None else acc + prod
            acc = np.asarray(acc)
            if red_tuple and acc.ndim:
                acc = acc.sum(axis=red_tuple, keepdims=True)
            np.add.at(carr, (ci + di, cj + dj), acc)
            if cmask is not None:
                cmask[ci + di, cj + dj] = True


def run(p: TensorProgram, inputs: dict[str, TensorValue]) -> dict[str, TensorValue]:
    """Execute ``p`` and return its output buffers. Deterministic; loop kinds
    are ignored (they affect cost, never semantics)."""
    _check_inputs(p, inputs)
    buffers: dict[str, np.ndarray] = {}
    written: dict[str, np.ndarray] = {}
    for b in p.buffers:
        if b.role == "input":
            buffers[b.name] = inputs[b.name].as_array().copy()
            written[b.name] = None
        else:
            buffers[b.name] = np.zeros(b.shape, dtype=np.int64)
            written[b.name] = np.zeros(b.shape, dtype=bool)
    written = {k: v for k, v in written.items() if v is not None}

    try:
        for path, stmt in ir.iter_stmts(p.root):
            if isinstance(stmt, Loop):
                continue
            loops = [l for _, l in ir.enclosing_loops(p.root, path)]
            if isinstance(stmt, Compute):
                _exec_compute_vec(stmt, loops, buffers, written)
            else:
                _exec_intrinsic_vec(stmt, loops, buffers, written)
    except _NeedsReference:
        return run_reference(p, inputs)

    return {b.name: TensorValue.from_array(buffers[b.name])
            for b in p.buffers if b.role == "output"}


# ---------------------------------------------------------------------------
# Sequential reference engine
# ---------------------------------------------------------------------------

def _ref_eval(e, env, buffers, where):
    if isinstance(e, IntConst):
        return e.value
    if isinstance(e, Var):
        return env[e.name]
    if isinstance(e, BinOp):
        a = _ref_eval(e.a, env, buffers, where)
        b = _ref_eval(e.b, env, buffers, where)
        if e.op == "add":
            return a + b
        if e.op == "sub":
            return a - b
        if e.op == "mul":
            return a * b
        if e.op == "max":
            return max(a, b)
        if e.op == "min":
            return min(a, b)
        if e.op == "floordiv":
            return a // b
        if e.op == "mod":
            return a % b
        raise TypeError(e.op)
    if isinstance(e, Select):
        c = _ref_eval(e.cond, env, buffers, where)
        branch = e.then if c != 0 else e.other
        return _ref_eval(branch, env, buffers, where)
    if isinstance(e, Load):
        arr = buffers[e.buffer]
        idx = []
        for d, iexpr in enumerate(e.indices):
            iv = _ref_eval(iexpr, env, buffers, where)
            if not 0 <= iv < arr.shape[d]:
                raise OutOfBoundsError(e.buffer, d, iv, arr.shape[d], where)
            idx.append(iv)
        return int(arr[tuple(idx)])
    raise TypeError(type(e))


def run_reference(p: TensorProgram, inputs: dict[str, TensorValue]) -> dict[str, TensorValue]:
    """One-iteration-at-a-time executor; the ground-truth semantics."""
    _check_inputs(p, inputs)
    buffers = {}
    for b in p.buffers:
        if b.role == "input":
            buffers[b.name] = inputs[b.name].as_array().copy()
        else:
            buffers[b.name] = np.zeros(b.shape, dtype=np.int64)

    def store_idx(stmt, env, where):
        arr = buffers[stmt.buffer]
        idx = []
        for d, iexpr in enumerate(stmt.indices):
            iv = _ref_eval(iexpr, env, buffers, where)
            if not 0 <= iv < arr.shape[d]:
                raise OutOfBoundsError(stmt.buffer, d, iv, arr.shape[d], where)
            idx.append(iv)
        return tuple(idx)

    def exec_stmt(stmt: Stmt, env: dict, loop_stack: list):
        if isinstance(stmt, Loop):
            for i in range(stmt.extent):
                env[stmt.var] = i
                loop_stack.append(stmt)
                for c in stmt.body:
                    exec_stmt(c, env, loop_stack)
                loop_stack.pop()
            env.pop(stmt.var, None)
            return
        if isinstance(stmt, Compute):
            where = f"block {stmt.name}"
            idx = store_idx(stmt, env, where)
            arr = buffers[stmt.buffer]
            if stmt.init is None:
                arr[idx] = _ref_eval(stmt.value, env, buffers, where)
                return
            red = ir.reduction_vars(stmt, [l.var for l in loop_stack])
            if all(env[v] == 0 for v in red):
                arr[idx] = _ref_eval(stmt.init, env, buffers, where)
            arr[idx] += _ref_eval(stmt.value, env, buffers, where)
            if stmt.epilogue is not None:
                extents = {l.var: l.extent for l in loop_stack}
                if all(env[v] == extents[v] - 1 for v in red):
                    arr[idx] = _ref_eval(stmt.epilogue, env, buffers, where)
            return
        if isinstance(stmt, Intrinsic):
            if stmt.name != "tu.mma4":
                raise ExecutionError(f"unknown intrinsic {stmt.name!r}")
            where = f"intrinsic {stmt.block}"
            red = ir.intrinsic_reduction_vars(stmt, [l.var for l in loop_stack])
            bases = []
            for buf, idx in stmt.operands:
                arr = buffers[buf]
                base = []
                for d, iexpr in enumerate(idx):
                    iv = _ref_eval(iexpr, env, buffers, where)
                    if not 0 <= iv <= arr.shape[d] - 4:
                        raise OutOfBoundsError(buf, d, iv, arr.shape[d], where)
                    base.append(iv)
                bases.append((arr, base))
            (carr, (ci, cj)), (aarr, (ai, ak)), (barr, (bk, bj)) = bases
            if stmt.init is not None and all(env[v] == 0 for v in red):
                init_val = _ref_eval(stmt.init, env, buffers, where)
                for di in range(4):
                    for dj in range(4):
                        carr[ci + di, cj + dj] = init_val
            for di in range(4):
                for dj in range(4):
                    for dk in range(4):
                        carr[ci + di, cj + dj] += (aarr[ai + di, ak + dk]
                                                   * barr[bk + dk, bj + dj])
            return
        raise TypeError(type(stmt))

    env: dict = {}
    for s in p.root:
        exec_stmt(s, env, [])
    return {b.name: TensorValue.from_array(buffers[b.name])
            for b in p.buffers if b.role == "output"}


def outputs_equal(a: dict[str, TensorValue], b: dict[str, TensorValue]) -> bool:
    if set(a) != set(b):
        return False
    return all(a[k].shape == b[k].shape and np.array_equal(a[k].data, b[k].data)
               for k in a)
