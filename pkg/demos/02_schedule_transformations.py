"""Transform a 1-D ReLU step by step: split its loop, parallelize the outer
part, vectorize the inner part. Every step preserves semantics, which the
interpreter verifies bit-exactly.
"""

import loopsched as ls

e0 = ls.relu1d(1024)
print("before:")
print(ls.pretty_print(e0))

s = ls.ScheduleState(e0, seed=0)
block, = s.get_blocks()
loop, = s.get_loops(block)

i0, i1, i2 = s.split(loop, [32, 8, 4])
s.parallelize(i0)
s.vectorize(i2)

print("after split [32, 8, 4] + parallelize + vectorize:")
print(ls.pretty_print(s.program))

inputs = ls.random_inputs(e0, seed=0)
same = ls.outputs_equal(ls.run(e0, inputs), ls.run(s.program, inputs))
print("outputs bit-equal:", same)

spec = ls.MachineSpec()
print(f"simulated latency: {float(ls.simulate_latency(e0, spec)):.0f} -> "
      f"{float(ls.simulate_latency(s.program, spec)):.0f} cycles")

# illegal transformations are rejected with a reason
g = ls.gmm(8, 8, 8)
sg = ls.ScheduleState(g)
b, = sg.get_blocks()
_, _, k = sg.get_loops(b)
try:
    sg.vectorize(k)
except ls.ScheduleError as exc:
    print("vectorizing the reduction loop fails:", exc)
