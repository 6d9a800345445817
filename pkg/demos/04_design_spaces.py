"""Transformation modules compose into design-space generators. Each block
gets one applicable module drawn as a traced decision, so the whole space is
searchable; small spaces can be enumerated outright.
"""

import loopsched as ls
from loopsched.spaces import enumerate_space, generate_space, run_generator

e0 = ls.dense_relu(16, 16, 16)
modules = [ls.multi_level_tiling("SSR"), ls.auto_inline()]
gen = ls.compose(modules)

# one stochastic run: the matmul gets tiled, the activation picks a location
program, trace = run_generator(e0, gen, seed=5)
print(ls.pretty_print(program))
print(f"{len(trace.instructions)} instructions, "
      f"prior log-prob {trace.prior_log_prob():.3f}")
print()

# sampling with de-duplication by structural hash
space = generate_space(e0, gen, k=64, seed=0)
print(f"64 runs produced {len(space.traces)} distinct programs")

# exhaustive enumeration (the oracle for search-quality tests)
full = enumerate_space(e0, gen, cap=10 ** 6)
print(f"exhaustive space: {len(full.traces)} traces, "
      f"{len(full.distinct_hashes())} distinct programs")
# 5 ordered divisor pairs per spatial loop (extent 16), 6 compute locations
print("expected 5 * 5 * 6 =", 5 * 5 * 6)

# module sets nest, and so do their spaces
bigger = enumerate_space(
    e0, ls.compose(modules + [ls.parallelize_vectorize_unroll()]), cap=10 ** 6)
print("space grows under composition:",
      full.distinct_hashes() < bigger.distinct_hashes())
