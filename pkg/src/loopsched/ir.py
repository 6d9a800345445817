"""Loop-nest IR for integer tensor programs.

A program is a set of named buffers plus a tree of loops and compute
statements. Index expressions are restricted to affine combinations of
loop variables (plus floor-div/mod by constants, which loop fusion
introduces), which keeps dependence and footprint analysis decidable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Union

ROLES = ("input", "output", "intermediate")
LOOP_KINDS = ("serial", "parallel", "vectorized", "unrolled")
BINOPS = ("add", "sub", "mul", "max", "min", "floordiv", "mod")


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntConst:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Load:
    buffer: str
    indices: tuple["Expr", ...]


@dataclass(frozen=True)
class BinOp:
    op: str
    a: "Expr"
    b: "Expr"


@dataclass(frozen=True)
class Select:
    """Ternary choice; only the taken branch is evaluated, so a Select
    condition may guard an out-of-range load (used for padding)."""

    cond: "Expr"
    then: "Expr"
    other: "Expr"


Expr = Union[IntConst, Var, Load, BinOp, Select]


def const(v: int) -> IntConst:
    return IntConst(int(v))


def var(name: str) -> Var:
    return Var(name)


def load(buffer: str, *indices: Expr) -> Load:
    return Load(buffer, tuple(indices))


def add(a: Expr, b: Expr) -> BinOp:
    return BinOp("add", a, b)


def sub(a: Expr, b: Expr) -> BinOp:
    return BinOp("sub", a, b)


def mul(a: Expr, b: Expr) -> BinOp:
    return BinOp("mul", a, b)


def emax(a: Expr, b: Expr) -> BinOp:
    return BinOp("max", a, b)


def emin(a: Expr, b: Expr) -> BinOp:
    return BinOp("min", a, b)


def floordiv(a: Expr, b: Expr) -> BinOp:
    return BinOp("floordiv", a, b)


def mod(a: Expr, b: Expr) -> BinOp:
    return BinOp("mod", a, b)


def select(cond: Expr, then: Expr, other: Expr) -> Select:
    return Select(cond, then, other)


# ---------------------------------------------------------------------------
# Statements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Loop:
    var: str
    extent: int
    kind: str
    body: tuple["Stmt", ...]


@dataclass(frozen=True)
class Compute:
    """A single store statement.

    With ``init`` absent the statement assigns ``buffer[indices] = value``.
    With ``init`` present it is a reduction: at the first iteration of the
    enclosing reduction loops the element is set to ``init``, and every
    iteration accumulates ``buffer[indices] += value``. ``epilogue``, when
    present, rewrites the element after the last reduction iteration; it may
    read the accumulated element through a Load of the same buffer.
    """

    name: str
    buffer: str
    indices: tuple[Expr, ...]
    value: Expr
    init: Optional[Expr] = None
    epilogue: Optional[Expr] = None


@dataclass(frozen=True)
class Intrinsic:
    """A hardware-unit call produced by tensorize. Operands are
    (buffer, base-index) pairs; scalar reference semantics are defined by
    the intrinsic registry in the schedule module."""

    name: str
    block: str
    operands: tuple[tuple[str, tuple[Expr, ...]], ...]
    init: Optional[Expr] = None


Stmt = Union[Loop, Compute, Intrinsic]


@dataclass(frozen=True)
class Buffer:
    name: str
    shape: tuple[int, ...]
    role: str


@dataclass(frozen=True)
class TensorProgram:
    buffers: tuple[Buffer, ...]
    root: tuple[Stmt, ...]

    def buffer(self, name: str) -> Buffer:
        for b in self.buffers:
            if b.name == name:
                return b
        raise KeyError(f"no buffer named {name!r}")

    def block_paths(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for path, stmt in iter_stmts(self.root):
            if isinstance(stmt, (Compute, Intrinsic)):
                out[block_name(stmt)] = path
        return out


def block_name(stmt: Stmt) -> str:
    if isinstance(stmt, Compute):
        return stmt.name
    if isinstance(stmt, Intrinsic):
        return stmt.block
    raise TypeError("not a block statement")


# ---------------------------------------------------------------------------
# Tree navigation
# ---------------------------------------------------------------------------

def iter_stmts(root: tuple[Stmt, ...]) -> Iterator[tuple[tuple[int, ...], Stmt]]:
    """Pre-order traversal yielding (path, stmt). A path is the sequence of
    child indices from the root statement list."""
    stack = [((i,), s) for i, s in reversed(list(enumerate(root)))]
    while stack:
        path, stmt = stack.pop()
        yield path, stmt
        if isinstance(stmt, Loop):
            for i, child in reversed(list(enumerate(stmt.body))):
                stack.append((path + (i,), child))


def get_stmt(root: tuple[Stmt, ...], path: tuple[int, ...]) -> Stmt:
    stmt = root[path[0]]
    for i in path[1:]:
        stmt = stmt.body[i]
    return stmt


def replace_stmt(root: tuple[Stmt, ...], path: tuple[int, ...],
                 new: list[Stmt]) -> tuple[Stmt, ...]:
    """Splice ``new`` in place of the statement at ``path`` (possibly empty,
    removing it)."""
    if len(path) == 1:
        return root[:path[0]] + tuple(new) + root[path[0] + 1:]
    parent = root[path[0]]
    rebuilt = replace_stmt(parent.body, path[1:], new)
    return root[:path[0]] + (replace(parent, body=rebuilt),) + root[path[0] + 1:]


def enclosing_loops(root: tuple[Stmt, ...],
                    path: tuple[int, ...]) -> list[tuple[tuple[int, ...], Loop]]:
    """Loops on the path to ``path``, outermost first (excluding the node
    at ``path`` itself)."""
    out = []
    stmt_list = root
    for depth in range(len(path) - 1):
        node = stmt_list[path[depth]]
        assert isinstance(node, Loop)
        out.append((path[:depth + 1], node))
        stmt_list = node.body
    return out


def find_block(root: tuple[Stmt, ...], name: str) -> Optional[tuple[int, ...]]:
    for path, stmt in iter_stmts(root):
        if isinstance(stmt, (Compute, Intrinsic)) and block_name(stmt) == name:
            return path
    return None


def find_loop(root: tuple[Stmt, ...], var_name: str) -> Optional[tuple[int, ...]]:
    for path, stmt in iter_stmts(root):
        if isinstance(stmt, Loop) and stmt.var == var_name:
            return path
    return None


# ---------------------------------------------------------------------------
# Expression analysis and transformation
# ---------------------------------------------------------------------------

def expr_vars(e: Expr) -> set[str]:
    if isinstance(e, IntConst):
        return set()
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Load):
        out = set()
        for i in e.indices:
            out |= expr_vars(i)
        return out
    if isinstance(e, BinOp):
        return expr_vars(e.a) | expr_vars(e.b)
    if isinstance(e, Select):
        return expr_vars(e.cond) | expr_vars(e.then) | expr_vars(e.other)
    raise TypeError(type(e))


def stmt_exprs(stmt: Stmt) -> list[Expr]:
    if isinstance(stmt, Compute):
        out = list(stmt.indices) + [stmt.value]
        if stmt.init is not None:
            out.append(stmt.init)
        if stmt.epilogue is not None:
            out.append(stmt.epilogue)
        return out
    if isinstance(stmt, Intrinsic):
        out = []
        for _, idx in stmt.operands:
            out.extend(idx)
        if stmt.init is not None:
            out.append(stmt.init)
        return out
    return []


def substitute(e: Expr, mapping: dict[str, Expr]) -> Expr:
    if isinstance(e, IntConst):
        return e
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Load):
        return Load(e.buffer, tuple(substitute(i, mapping) for i in e.indices))
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute(e.a, mapping), substitute(e.b, mapping))
    if isinstance(e, Select):
        return Select(substitute(e.cond, mapping), substitute(e.then, mapping),
                      substitute(e.other, mapping))
    raise TypeError(type(e))


def substitute_stmt(stmt: Stmt, mapping: dict[str, Expr]) -> Stmt:
    if isinstance(stmt, Loop):
        return replace(stmt, body=tuple(substitute_stmt(s, mapping) for s in stmt.body))
    if isinstance(stmt, Compute):
        return replace(
            stmt,
            indices=tuple(substitute(i, mapping) for i in stmt.indices),
            value=substitute(stmt.value, mapping),
            init=None if stmt.init is None else substitute(stmt.init, mapping),
            epilogue=None if stmt.epilogue is None else substitute(stmt.epilogue, mapping),
        )
    if isinstance(stmt, Intrinsic):
        return replace(
            stmt,
            operands=tuple((b, tuple(substitute(i, mapping) for i in idx))
                           for b, idx in stmt.operands),
            init=None if stmt.init is None else substitute(stmt.init, mapping),
        )
    raise TypeError(type(stmt))


def rename_loads(e: Expr, old_buffer: str, new_buffer: str) -> Expr:
    if isinstance(e, (IntConst, Var)):
        return e
    if isinstance(e, Load):
        buf = new_buffer if e.buffer == old_buffer else e.buffer
        return Load(buf, tuple(rename_loads(i, old_buffer, new_buffer) for i in e.indices))
    if isinstance(e, BinOp):
        return BinOp(e.op, rename_loads(e.a, old_buffer, new_buffer),
                     rename_loads(e.b, old_buffer, new_buffer))
    if isinstance(e, Select):
        return Select(rename_loads(e.cond, old_buffer, new_buffer),
                      rename_loads(e.then, old_buffer, new_buffer),
                      rename_loads(e.other, old_buffer, new_buffer))
    raise TypeError(type(e))


def affine_coeffs(e: Expr) -> Optional[tuple[dict[str, int], int]]:
    """Decompose ``e`` as ``c0 + sum(ci * vari)``. Returns None when the
    expression is not affine (contains min/max/select/load/div/mod or a
    product of two variable terms)."""
    if isinstance(e, IntConst):
        return {}, e.value
    if isinstance(e, Var):
        return {e.name: 1}, 0
    if isinstance(e, BinOp):
        if e.op in ("add", "sub"):
            left = affine_coeffs(e.a)
            right = affine_coeffs(e.b)
            if left is None or right is None:
                return None
            sign = 1 if e.op == "add" else -1
            coeffs = dict(left[0])
            for k, v in right[0].items():
                coeffs[k] = coeffs.get(k, 0) + sign * v
                if coeffs[k] == 0:
                    del coeffs[k]
            return coeffs, left[1] + sign * right[1]
        if e.op == "mul":
            left = affine_coeffs(e.a)
            right = affine_coeffs(e.b)
            if left is None or right is None:
                return None
            if left[0] and right[0]:
                return None  # var * var
            if right[0]:
                left, right = right, left
            scale = right[1]
            return {k: v * scale for k, v in left[0].items() if v * scale != 0}, left[1] * scale
        return None
    return None


def is_quasi_affine(e: Expr) -> bool:
    """Affine, or floor-div/mod of a quasi-affine expression by a positive
    constant. This is the admissible form for index expressions."""
    if affine_coeffs(e) is not None:
        return True
    if isinstance(e, BinOp) and e.op in ("floordiv", "mod"):
        return (isinstance(e.b, IntConst) and e.b.value > 0 and is_quasi_affine(e.a))
    if isinstance(e, BinOp) and e.op in ("add", "sub", "mul"):
        # e.g. (u // 4) * 2 + v: allow affine combinations of quasi-affine terms
        if e.op == "mul":
            if isinstance(e.b, IntConst):
                return is_quasi_affine(e.a)
            if isinstance(e.a, IntConst):
                return is_quasi_affine(e.b)
            return False
        return is_quasi_affine(e.a) and is_quasi_affine(e.b)
    return False


def expr_range(e: Expr, ranges: dict[str, tuple[int, int]]) -> tuple[int, int]:
    """Inclusive interval bound of ``e`` given per-variable inclusive ranges.
    Variables missing from ``ranges`` are treated as fixed (width-0 at an
    unknown base), which is modelled by (0, 0) relative placement; callers
    that need absolute bounds must supply every variable."""
    if isinstance(e, IntConst):
        return e.value, e.value
    if isinstance(e, Var):
        return ranges.get(e.name, (0, 0))
    if isinstance(e, BinOp):
        alo, ahi = expr_range(e.a, ranges)
        blo, bhi = expr_range(e.b, ranges)
        if e.op == "add":
            return alo + blo, ahi + bhi
        if e.op == "sub":
            return alo - bhi, ahi - blo
        if e.op == "mul":
            products = (alo * blo, alo * bhi, ahi * blo, ahi * bhi)
            return min(products), max(products)
        if e.op == "max":
            return max(alo, blo), max(ahi, bhi)
        if e.op == "min":
            return min(alo, blo), min(ahi, bhi)
        if e.op == "floordiv":
            if blo == bhi and blo > 0:
                return alo // blo, ahi // blo
            return min(alo // max(blo, 1), alo), max(ahi, ahi // max(blo, 1))
        if e.op == "mod":
            if blo == bhi and blo > 0:
                if alo // blo == ahi // blo and alo >= 0:
                    return alo % blo, ahi % blo
                return 0, blo - 1
            return 0, max(bhi - 1, 0)
    if isinstance(e, Select):
        tlo, thi = expr_range(e.then, ranges)
        olo, ohi = expr_range(e.other, ranges)
        return min(tlo, olo), max(thi, ohi)
    if isinstance(e, Load):
        raise ValueError("cannot bound a data-dependent expression")
    raise TypeError(type(e))


def count_arith_ops(e: Expr) -> int:
    """Value-level arithmetic operation count. Index expressions inside loads
    are addressing, not arithmetic, and contribute nothing."""
    if isinstance(e, (IntConst, Var, Load)):
        return 0
    if isinstance(e, BinOp):
        return 1 + count_arith_ops(e.a) + count_arith_ops(e.b)
    if isinstance(e, Select):
        return 1 + count_arith_ops(e.cond) + count_arith_ops(e.then) + count_arith_ops(e.other)
    raise TypeError(type(e))


def collect_loads(e: Expr) -> list[Load]:
    out = []

    def walk(x):
        if isinstance(x, Load):
            out.append(x)
            for i in x.indices:
                walk(i)
        elif isinstance(x, BinOp):
            walk(x.a)
            walk(x.b)
        elif isinstance(x, Select):
            walk(x.cond)
            walk(x.then)
            walk(x.other)

    walk(e)
    return out


def reduction_vars(stmt: Compute, loop_vars: list[str]) -> list[str]:
    """Enclosing loop vars that drive the reduction: they appear in the value
    (or init) but not in the store indices. Empty for assignment statements."""
    if stmt.init is None:
        return []
    store = set()
    for i in stmt.indices:
        store |= expr_vars(i)
    used = expr_vars(stmt.value)
    if stmt.init is not None:
        used |= expr_vars(stmt.init)
    return [v for v in loop_vars if v in used and v not in store]


def intrinsic_reduction_vars(stmt: Intrinsic, loop_vars: list[str]) -> list[str]:
    """For an intrinsic, reduction vars appear in non-output operand bases
    but not in the output (first) operand's base."""
    out_vars = set()
    for i in stmt.operands[0][1]:
        out_vars |= expr_vars(i)
    in_vars = set()
    for _, idx in stmt.operands[1:]:
        for i in idx:
            in_vars |= expr_vars(i)
    return [v for v in loop_vars if v in in_vars and v not in out_vars]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_ir(p: TensorProgram) -> list[str]:
    """Returns a list of diagnostics; empty means the program is valid."""
    diags = []
    names = [b.name for b in p.buffers]
    if len(set(names)) != len(names):
        diags.append("duplicate buffer name")
    for b in p.buffers:
        if not b.shape or any(s < 1 for s in b.shape):
            diags.append(f"buffer {b.name}: shape must be non-empty with positive extents")
        if b.role not in ROLES:
            diags.append(f"buffer {b.name}: unknown role {b.role!r}")
    buffers = {b.name: b for b in p.buffers}

    block_names = []
    loop_vars_seen = []
    writers: dict[str, list[str]] = {}
    readers: dict[str, list[str]] = {}

    for path, stmt in iter_stmts(p.root):
        where = "/".join(map(str, path))
        if isinstance(stmt, Loop):
            if stmt.extent < 1:
                diags.append(f"loop {stmt.var} at {where}: non-positive extent")
            if stmt.kind not in LOOP_KINDS:
                diags.append(f"loop {stmt.var} at {where}: unknown kind {stmt.kind!r}")
            if stmt.var in loop_vars_seen:
                diags.append(f"loop {stmt.var} at {where}: duplicate loop variable")
            loop_vars_seen.append(stmt.var)
            continue

        name = block_name(stmt)
        if name in block_names:
            diags.append(f"block {name} at {where}: duplicate block name")
        block_names.append(name)
        bound = {loop.var for _, loop in enclosing_loops(p.root, path)}

        for e in stmt_exprs(stmt):
            for v in expr_vars(e):
                if v not in bound:
                    diags.append(f"block {name} at {where}: unbound variable {v!r}")

        def check_access(buf: str, indices: tuple[Expr, ...], what: str):
            if buf not in buffers:
                diags.append(f"block {name} at {where}: {what} of undeclared buffer {buf!r}")
                return
            if len(indices) != len(buffers[buf].shape):
                diags.append(f"block {name} at {where}: {what} of {buf} has rank "
                             f"{len(indices)}, buffer has rank {len(buffers[buf].shape)}")
            for idx in indices:
                if not is_quasi_affine(idx):
                    diags.append(f"block {name} at {where}: non-affine index in {what} of {buf}")

        if isinstance(stmt, Compute):
            check_access(stmt.buffer, stmt.indices, "store")
            writers.setdefault(stmt.buffer, []).append(name)
            value_exprs = [stmt.value]
            if stmt.init is not None:
                value_exprs.append(stmt.init)
            if stmt.epilogue is not None:
                value_exprs.append(stmt.epilogue)
            for e in value_exprs:
                for ld in collect_loads(e):
                    check_access(ld.buffer, ld.indices, "load")
                    if ld.buffer != stmt.buffer:
                        readers.setdefault(ld.buffer, []).append(name)
            if stmt.init is None:
                store_vars = set()
                for i in stmt.indices:
                    store_vars |= expr_vars(i)
                stray = expr_vars(stmt.value) - store_vars - (expr_vars(stmt.value) - bound)
                stray = {v for v in stray if v in bound and v not in store_vars}
                if stray:
                    diags.append(f"block {name} at {where}: assignment uses loop vars "
                                 f"{sorted(stray)} absent from its store index "
                                 "(undeclared reduction)")
                if stmt.epilogue is not None:
                    diags.append(f"block {name} at {where}: epilogue on a non-reduction block")
        else:
            if not stmt.operands:
                diags.append(f"intrinsic {name} at {where}: no operands")
            for buf, idx in stmt.operands:
                check_access(buf, idx, "operand")
            if stmt.operands:
                writers.setdefault(stmt.operands[0][0], []).append(name)
                for buf, _ in stmt.operands[1:]:
                    readers.setdefault(buf, []).append(name)

    for buf, ws in writers.items():
        if len(set(ws)) > 1:
            diags.append(f"buffer {buf}: written by multiple blocks {sorted(set(ws))}")
        if buf in buffers and buffers[buf].role == "input":
            diags.append(f"buffer {buf}: input buffer is written")
    for b in p.buffers:
        if b.role == "output" and b.name not in writers:
            diags.append(f"buffer {b.name}: output buffer is never written")

    # producer -> consumer acyclicity over blocks
    produced_by = {buf: ws[0] for buf, ws in writers.items() if ws}
    edges: dict[str, set[str]] = {n: set() for n in block_names}
    for buf, rs in readers.items():
        if buf in produced_by:
            for r in set(rs):
                if r != produced_by[buf]:
                    edges.setdefault(produced_by[buf], set()).add(r)
    state: dict[str, int] = {}

    def has_cycle(n: str) -> bool:
        state[n] = 1
        for m in edges.get(n, ()):
            if state.get(m, 0) == 1:
                return True
            if state.get(m, 0) == 0 and has_cycle(m):
                return True
        state[n] = 2
        return False

    for n in block_names:
        if state.get(n, 0) == 0 and has_cycle(n):
            diags.append(f"cyclic producer/consumer dependence involving block {n}")
            break

    return diags


def check_valid(p: TensorProgram) -> None:
    diags = validate_ir(p)
    if diags:
        raise ValueError("invalid program: " + "; ".join(diags))


# ---------------------------------------------------------------------------
# Canonicalization, equality, hashing
# ---------------------------------------------------------------------------

def _canonical_renaming(root: tuple[Stmt, ...]) -> dict[str, str]:
    mapping = {}
    for _, stmt in iter_stmts(root):
        if isinstance(stmt, Loop) and stmt.var not in mapping:
            mapping[stmt.var] = f"v{len(mapping)}"
    return mapping


def canonicalize(p: TensorProgram) -> TensorProgram:
    """Rename loop variables in order of first binding; the result is
    identical for alpha-equivalent programs."""
    mapping = _canonical_renaming(p.root)
    subst = {old: Var(new) for old, new in mapping.items()}

    def walk(stmt: Stmt) -> Stmt:
        if isinstance(stmt, Loop):
            return Loop(mapping[stmt.var], stmt.extent, stmt.kind,
                        tuple(walk(s) for s in stmt.body))
        return substitute_stmt(stmt, subst)

    return TensorProgram(p.buffers, tuple(walk(s) for s in p.root))


def structural_equal(a: TensorProgram, b: TensorProgram) -> bool:
    return canonicalize(a) == canonicalize(b)


def structural_hash(p: TensorProgram) -> int:
    """64-bit hash, stable across runs and invariant under loop-var renaming."""
    text = serialize(canonicalize(p))
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


# ---------------------------------------------------------------------------
# Serialization (JSON, fixed schema)
# ---------------------------------------------------------------------------

def _expr_to_json(e: Expr):
    if isinstance(e, IntConst):
        return {"int": e.value}
    if isinstance(e, Var):
        return {"var": e.name}
    if isinstance(e, Load):
        return {"load": {"buffer": e.buffer, "indices": [_expr_to_json(i) for i in e.indices]}}
    if isinstance(e, BinOp):
        return {e.op: [_expr_to_json(e.a), _expr_to_json(e.b)]}
    if isinstance(e, Select):
        return {"select": [_expr_to_json(e.cond), _expr_to_json(e.then), _expr_to_json(e.other)]}
    raise TypeError(type(e))


def _stmt_to_json(s: Stmt):
    if isinstance(s, Loop):
        return {"loop": {"var": s.var, "extent": s.extent, "kind": s.kind,
                         "body": [_stmt_to_json(c) for c in s.body]}}
    if isinstance(s, Compute):
        d = {"name": s.name, "buffer": s.buffer,
             "indices": [_expr_to_json(i) for i in s.indices],
             "value": _expr_to_json(s.value)}
        if s.init is not None:
            d["init"] = _expr_to_json(s.init)
        if s.epilogue is not None:
            d["epilogue"] = _expr_to_json(s.epilogue)
        return {"compute": d}
    if isinstance(s, Intrinsic):
        d = {"name": s.name, "block": s.block,
             "operands": [{"buffer": b, "indices": [_expr_to_json(i) for i in idx]}
                          for b, idx in s.operands]}
        if s.init is not None:
            d["init"] = _expr_to_json(s.init)
        return {"intrinsic": d}
    raise TypeError(type(s))


def serialize(p: TensorProgram) -> str:
    doc = {
        "buffers": [{"name": b.name, "shape": list(b.shape), "role": b.role}
                    for b in p.buffers],
        "root": [_stmt_to_json(s) for s in p.root],
    }
    return json.dumps(doc, sort_keys=True)


class ParseError(ValueError):
    def __init__(self, position: str, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"at {position}: {reason}")


def _expr_from_json(d, pos: str) -> Expr:
    if not isinstance(d, dict) or len(d) != 1:
        raise ParseError(pos, "expression must be a single-key object")
    tag, payload = next(iter(d.items()))
    if tag == "int":
        if not isinstance(payload, int):
            raise ParseError(pos, "int payload must be an integer")
        return IntConst(payload)
    if tag == "var":
        if not isinstance(payload, str):
            raise ParseError(pos, "var payload must be a string")
        return Var(payload)
    if tag == "load":
        try:
            buf = payload["buffer"]
            idx = payload["indices"]
        except (TypeError, KeyError) as exc:
            raise ParseError(pos, f"malformed load: missing {exc}") from None
        return Load(buf, tuple(_expr_from_json(i, f"{pos}.load[{k}]")
                               for k, i in enumerate(idx)))
    if tag in BINOPS:
        if not isinstance(payload, list) or len(payload) != 2:
            raise ParseError(pos, f"{tag} expects a 2-element list")
        return BinOp(tag, _expr_from_json(payload[0], f"{pos}.{tag}[0]"),
                     _expr_from_json(payload[1], f"{pos}.{tag}[1]"))
    if tag == "select":
        if not isinstance(payload, list) or len(payload) != 3:
            raise ParseError(pos, "select expects a 3-element list")
        return Select(*(_expr_from_json(payload[i], f"{pos}.select[{i}]") for i in range(3)))
    raise ParseError(pos, f"unknown expression tag {tag!r}")


def _stmt_from_json(d, pos: str) -> Stmt:
    if not isinstance(d, dict) or len(d) != 1:
        raise ParseError(pos, "statement must be a single-key object")
    tag, payload = next(iter(d.items()))
    if tag == "loop":
        try:
            v, ext, kind, body = payload["var"], payload["extent"], payload["kind"], payload["body"]
        except (TypeError, KeyError) as exc:
            raise ParseError(pos, f"malformed loop: missing {exc}") from None
        return Loop(v, ext, kind, tuple(_stmt_from_json(c, f"{pos}.loop.body[{i}]")
                                        for i, c in enumerate(body)))
    if tag == "compute":
        try:
            name, buf = payload["name"], payload["buffer"]
            indices, value = payload["indices"], payload["value"]
        except (TypeError, KeyError) as exc:
            raise ParseError(pos, f"malformed compute: missing {exc}") from None
        init = payload.get("init")
        epi = payload.get("epilogue")
        return Compute(
            name, buf,
            tuple(_expr_from_json(i, f"{pos}.compute.indices[{k}]") for k, i in enumerate(indices)),
            _expr_from_json(value, f"{pos}.compute.value"),
            None if init is None else _expr_from_json(init, f"{pos}.compute.init"),
            None if epi is None else _expr_from_json(epi, f"{pos}.compute.epilogue"),
        )
    if tag == "intrinsic":
        try:
            name, block, operands = payload["name"], payload["block"], payload["operands"]
        except (TypeError, KeyError) as exc:
            raise ParseError(pos, f"malformed intrinsic: missing {exc}") from None
        init = payload.get("init")
        ops = tuple(
            (op["buffer"], tuple(_expr_from_json(i, f"{pos}.intrinsic.operands[{k}][{j}]")
                                 for j, i in enumerate(op["indices"])))
            for k, op in enumerate(operands))
        return Intrinsic(name, block, ops,
                         None if init is None else _expr_from_json(init, f"{pos}.intrinsic.init"))
    raise ParseError(pos, f"unknown statement tag {tag!r}")


def deserialize(text: str) -> TensorProgram:
    if not text.strip():
        raise ParseError("<input>", "empty input")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"offset {exc.pos}", exc.msg) from None
    if not isinstance(doc, dict):
        raise ParseError("<top>", "expected an object")
    if "buffers" not in doc or "root" not in doc:
        raise ParseError("<top>", "missing 'buffers' or 'root'")
    buffers = []
    for i, b in enumerate(doc["buffers"]):
        try:
            buffers.append(Buffer(b["name"], tuple(b["shape"]), b["role"]))
        except (TypeError, KeyError) as exc:
            raise ParseError(f"buffers[{i}]", f"missing {exc}") from None
    root = tuple(_stmt_from_json(s, f"root[{i}]") for i, s in enumerate(doc["root"]))
    return TensorProgram(tuple(buffers), root)


# ---------------------------------------------------------------------------
# Pretty printing
# ---------------------------------------------------------------------------

def _expr_str(e: Expr) -> str:
    if isinstance(e, IntConst):
        return str(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Load):
        return f"{e.buffer}[{', '.join(_expr_str(i) for i in e.indices)}]"
    if isinstance(e, BinOp):
        sym = {"add": "+", "sub": "-", "mul": "*", "floordiv": "//", "mod": "%"}
        if e.op in sym:
            return f"({_expr_str(e.a)} {sym[e.op]} {_expr_str(e.b)})"
        return f"{e.op}({_expr_str(e.a)}, {_expr_str(e.b)})"
    if isinstance(e, Select):
        return f"select({_expr_str(e.cond)}, {_expr_str(e.then)}, {_expr_str(e.other)})"
    raise TypeError(type(e))


def pretty_print(p: TensorProgram) -> str:
    """Indentation-based rendering after variable normalization, so
    structurally-equal programs print identically."""
    q = canonicalize(p)
    lines = []
    for b in q.buffers:
        lines.append(f"buffer {b.name}[{', '.join(map(str, b.shape))}]  # {b.role}")

    def emit(stmt: Stmt, depth: int):
        pad = "  " * depth
        if isinstance(stmt, Loop):
            kind = "" if stmt.kind == "serial" else f" {stmt.kind}"
            lines.append(f"{pad}for {stmt.var} in {stmt.extent}{kind}:")
            for c in stmt.body:
                emit(c, depth + 1)
        elif isinstance(stmt, Compute):
            target = f"{stmt.buffer}[{', '.join(_expr_str(i) for i in stmt.indices)}]"
            if stmt.init is not None:
                lines.append(f"{pad}{target} = {_expr_str(stmt.init)}  # init ({stmt.name})")
                lines.append(f"{pad}{target} += {_expr_str(stmt.value)}")
                if stmt.epilogue is not None:
                    lines.append(f"{pad}{target} = {_expr_str(stmt.epilogue)}  # epilogue")
            else:
                lines.append(f"{pad}{target} = {_expr_str(stmt.value)}  # {stmt.name}")
        else:
            ops = ", ".join(f"{b}[{', '.join(_expr_str(i) for i in idx)}]"
                            for b, idx in stmt.operands)
            lines.append(f"{pad}{stmt.name}({ops})  # {stmt.block}")

    for s in q.root:
        emit(s, 0)
    return "\n".join(lines) + "\n"
