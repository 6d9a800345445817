"""Builtin workload builders: small integer tensor programs used as tuning
targets and test fixtures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import ir
from .ir import (Buffer, Compute, IntConst, Loop, Select, TensorProgram,
                 add, emax, emin, load, mul, sub, var)


def relu1d(n: int = 1024) -> TensorProgram:
    """B[i] = max(A[i], 0) over a single loop."""
    _positive(n=n)
    p = TensorProgram(
        buffers=(Buffer("A", (n,), "input"), Buffer("B", (n,), "output")),
        root=(Loop("i", n, "serial", (
            Compute("relu", "B", (var("i"),),
                    emax(load("A", var("i")), IntConst(0))),)),))
    ir.check_valid(p)
    return p


def gmm(n: int = 64, m: int = 64, k: int = 64) -> TensorProgram:
    """C[i,j] = sum_k A[i,k] * B[k,j]."""
    _positive(n=n, m=m, k=k)
    body = Compute("matmul", "C", (var("i"), var("j")),
                   mul(load("A", var("i"), var("k")), load("B", var("k"), var("j"))),
                   init=IntConst(0))
    p = TensorProgram(
        buffers=(Buffer("A", (n, k), "input"), Buffer("B", (k, m), "input"),
                 Buffer("C", (n, m), "output")),
        root=(Loop("i", n, "serial", (
            Loop("j", m, "serial", (
                Loop("k", k, "serial", (body,)),)),)),))
    ir.check_valid(p)
    return p


def dense_relu(n: int = 128, m: int = 128, k: int = 128) -> TensorProgram:
    """R = max(A @ W, 0) with the matmul and the activation as two blocks."""
    _positive(n=n, m=m, k=k)
    dense = Compute("dense", "D", (var("i"), var("j")),
                    mul(load("A", var("i"), var("k")), load("W", var("k"), var("j"))),
                    init=IntConst(0))
    relu = Compute("relu", "R", (var("a"), var("b")),
                   emax(load("D", var("a"), var("b")), IntConst(0)))
    p = TensorProgram(
        buffers=(Buffer("A", (n, k), "input"), Buffer("W", (k, m), "input"),
                 Buffer("D", (n, m), "intermediate"), Buffer("R", (n, m), "output")),
        root=(
            Loop("i", n, "serial", (
                Loop("j", m, "serial", (
                    Loop("k", k, "serial", (dense,)),)),)),
            Loop("a", n, "serial", (
                Loop("b", m, "serial", (relu,)),)),
        ))
    ir.check_valid(p)
    return p


def conv1d(length: int = 64, in_ch: int = 4, out_ch: int = 8, kernel: int = 3,
           stride: int = 1, padding: int = 1) -> TensorProgram:
    """1-D convolution over channels; zero padding is materialized by a
    guarded elementwise pad stage so every index stays affine."""
    _positive(length=length, in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride)
    if padding < 0:
        raise ValueError("padding must be non-negative")
    span = length + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv1d shape mismatch: (length + 2*padding - kernel) = {span} "
            f"must be a non-negative multiple of stride {stride}")
    out_len = span // stride + 1

    buffers = [Buffer("X", (in_ch, length), "input"),
               Buffer("W", (out_ch, in_ch, kernel), "input"),
               Buffer("O", (out_ch, out_len), "output")]
    stmts = []
    src = "X"
    if padding > 0:
        src = "P"
        buffers.insert(2, Buffer("P", (in_ch, length + 2 * padding), "intermediate"))
        x = var("x")
        # 1 exactly when padding <= x < length + padding, else 0
        in_lo = emin(emax(add(sub(x, IntConst(padding)), IntConst(1)), IntConst(0)),
                     IntConst(1))
        in_hi = emin(emax(sub(IntConst(length + padding), x), IntConst(0)), IntConst(1))
        guard = mul(in_lo, in_hi)
        pad = Compute("pad", "P", (var("c"), x),
                      Select(guard, load("X", var("c"), sub(x, IntConst(padding))),
                             IntConst(0)))
        stmts.append(Loop("c", in_ch, "serial", (
            Loop("x", length + 2 * padding, "serial", (pad,)),)))

    pos = var("ow") if stride == 1 else mul(var("ow"), IntConst(stride))
    conv = Compute("conv", "O", (var("oc"), var("ow")),
                   mul(load(src, var("ic"), add(pos, var("kw"))),
                       load("W", var("oc"), var("ic"), var("kw"))),
                   init=IntConst(0))
    stmts.append(Loop("oc", out_ch, "serial", (
        Loop("ow", out_len, "serial", (
            Loop("ic", in_ch, "serial", (
                Loop("kw", kernel, "serial", (conv,)),)),)),)))
    p = TensorProgram(tuple(buffers), tuple(stmts))
    ir.check_valid(p)
    return p


def _positive(**kwargs):
    for name, value in kwargs.items():
        if value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value}")


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    params: tuple[str, ...]
    defaults: tuple[int, ...]
    builder: Callable[..., TensorProgram]
    description: str


REGISTRY: dict[str, WorkloadSpec] = {
    "relu1d": WorkloadSpec("relu1d", ("n",), (1024,), relu1d,
                           "elementwise max(x, 0) over a vector"),
    "gmm": WorkloadSpec("gmm", ("n", "m", "k"), (64, 64, 64), gmm,
                        "dense matrix multiply C[n,m] = A[n,k] @ B[k,m]"),
    "dense_relu": WorkloadSpec("dense_relu", ("n", "m", "k"), (128, 128, 128),
                               dense_relu, "matmul followed by ReLU"),
    "conv1d": WorkloadSpec("conv1d",
                           ("length", "in_ch", "out_ch", "kernel", "stride", "padding"),
                           (64, 4, 8, 3, 1, 1), conv1d,
                           "1-D convolution with zero padding"),
}


def build_workload(name: str, shape=None) -> TensorProgram:
    if name not in REGISTRY:
        raise ValueError(f"unknown workload {name!r}; known: {sorted(REGISTRY)}")
    spec = REGISTRY[name]
    args = list(spec.defaults)
    if shape:
        if len(shape) > len(spec.params):
            raise ValueError(f"{name} takes at most {len(spec.params)} shape "
                             f"parameters {spec.params}, got {len(shape)}")
        args[:len(shape)] = [int(s) for s in shape]
    return spec.builder(*args)
