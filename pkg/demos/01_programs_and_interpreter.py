"""Build a loop-nest tensor program by hand, validate it, print it, run it.

Programs are integer-only, so semantic checks are exact: two programs are
equivalent iff their outputs are bit-equal.
"""

import numpy as np

import loopsched as ls
from loopsched.interp import TensorValue
from loopsched.ir import (Buffer, Compute, IntConst, Loop, TensorProgram,
                          emax, load, mul, var)

# C[i, j] = sum_k A[i, k] * B[k, j], followed by a ReLU into R.
matmul = Compute("matmul", "C", (var("i"), var("j")),
                 mul(load("A", var("i"), var("k")), load("B", var("k"), var("j"))),
                 init=IntConst(0))
relu = Compute("relu", "R", (var("a"), var("b")),
               emax(load("C", var("a"), var("b")), IntConst(0)))

program = TensorProgram(
    buffers=(Buffer("A", (4, 4), "input"), Buffer("B", (4, 4), "input"),
             Buffer("C", (4, 4), "intermediate"), Buffer("R", (4, 4), "output")),
    root=(
        Loop("i", 4, "serial", (Loop("j", 4, "serial", (
            Loop("k", 4, "serial", (matmul,)),)),)),
        Loop("a", 4, "serial", (Loop("b", 4, "serial", (relu,)),)),
    ))

diags = ls.validate_ir(program)
print("validation diagnostics:", diags or "none")
print()
print(ls.pretty_print(program))

# run on concrete tensors and check against numpy
a = np.arange(16, dtype=np.int64).reshape(4, 4) - 8
b = np.eye(4, dtype=np.int64) * 2
out = ls.run(program, {"A": TensorValue.from_array(a),
                       "B": TensorValue.from_array(b)})
print("R =")
print(out["R"].as_array())
print("matches numpy:", np.array_equal(out["R"].as_array(), np.maximum(a @ b, 0)))

# programs serialize to JSON and round-trip exactly
text = ls.serialize(program)
again = ls.deserialize(text)
print("serialize round-trip structural_equal:", ls.structural_equal(program, again))
print("structural hash:", hex(ls.structural_hash(program)))
