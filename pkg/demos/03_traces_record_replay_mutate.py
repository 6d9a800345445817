"""Every schedule call is recorded as one trace instruction. Traces replay
deterministically, serialize to JSON lines, and support decision mutation
with validation: a mutated trace either replays cleanly or is rejected at a
named instruction.
"""

import random

import loopsched as ls
from loopsched.trace import (Accepted, mutate, replay, serialize_trace,
                             validate_trace)

e0 = ls.gmm(12, 12, 12)
s = ls.ScheduleState(e0, seed=7)
block, = s.get_blocks()
li, lj, lk = s.get_loops(block)

# sampled tile sizes become recorded decisions
ti = s.sample_perfect_tile(li, 2)
i0, i1 = s.split(li, ti)
tj = s.sample_perfect_tile(lj, 2)
j0, j1 = s.split(lj, tj)
s.reorder([i0, j0, i1, j1, lk])

trace = s.trace()
print("recorded trace:")
print(serialize_trace(trace))

program, _ = replay(e0, trace, mode="follow")
print("replay reproduces the program:", ls.structural_equal(program, s.program))

resampled, rt = replay(e0, trace, mode="resample", seed=99)
print("resampled decisions:",
      [i.decision["tile"] for i in rt.instructions if i.op == "sample_perfect_tile"])

rng = random.Random(0)
accepted = rejected = 0
for _ in range(20):
    mutant, idx = mutate(trace, rng)
    verdict = validate_trace(e0, mutant)
    if isinstance(verdict, Accepted):
        accepted += 1
    else:
        rejected += 1
        print(f"rejected at instruction {verdict.index}: {verdict.reason}")
print(f"20 mutations: {accepted} accepted, {rejected} rejected")
print(f"trace log-prior: {trace.prior_log_prob():.4f} "
      f"(6 tile choices per loop, two sampled loops -> log 1/36)")
