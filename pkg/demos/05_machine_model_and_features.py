"""The simulated machine assigns every program an exact rational latency.
It rewards cache-resident tiles, contiguous vectorization, outermost
parallelism, short unrolled loops, and tensor-unit calls; the feature vector
exposes the same signals to the learned cost model.
"""

import loopsched as ls
from loopsched import ir
from loopsched.machine import MachineSpec, footprint, simulate_latency
from loopsched.spaces import run_generator

spec = MachineSpec()
print("machine:", spec.to_json())
print()

g = ls.gmm(64, 64, 64)
print(f"naive 64^3 matmul: {float(simulate_latency(g, spec)):,.0f} cycles")

# an 8x8x8 tile keeps the inner working set cache-resident
s = ls.ScheduleState(g)
b, = s.get_blocks()
li, lj, lk = s.get_loops(b)
i0, i1 = s.split(li, [8, 8])
j0, j1 = s.split(lj, [8, 8])
k0, k1 = s.split(lk, [8, 8])
s.reorder([i0, j0, k0, i1, j1, k1])
tiled = s.program
print(f"8^3-tiled:          {float(simulate_latency(tiled, spec)):,.0f} cycles")

# tensorizing a 4x4x4 tile replaces 64 multiply-adds with one unit call
utu, _ = run_generator(g, ls.compose([ls.use_tensor_unit()]), seed=0)
print(f"tensor-unit tiling: {float(simulate_latency(utu, spec)):,.0f} cycles")
print()

# footprint analysis per loop suffix (elements touched per buffer)
path = ir.find_block(tiled.root, "matmul")
levels = footprint(tiled, path)
print("tiled matmul footprints by suffix depth:")
for t, sizes in enumerate(levels):
    print(f"  fix {t} outer loops: {sizes} (total {sum(sizes.values())})")
print()

names = ["log1p(trips)", "log1p(flops)", "vec frac", "par frac",
         "log1p(hits)", "log1p(misses)", "unroll frac", "tensor calls", "depth"]
for label, p in (("naive", g), ("tiled", tiled), ("tensorized", utu)):
    feats = ls.featurize(p, spec)
    print(f"{label:>11}: " + "  ".join(f"{n}={v:.2f}" for n, v in zip(names, feats)))
