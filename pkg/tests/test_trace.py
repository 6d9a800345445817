import math
import random

import pytest

import loopsched as ls
from loopsched import ir
from loopsched.schedule import ScheduleState
from loopsched.spaces import run_generator
from loopsched.trace import (Accepted, Rejected, ReplayError, Trace,
                             TraceParseError, deserialize_trace, mutate,
                             replay, serialize_trace, trace_prior,
                             validate_trace)

from conftest import random_transformed


def _record_split_parallel_vectorize(p):
    s = ScheduleState(p, seed=0)
    b, = s.get_blocks()
    loop, = s.get_loops(b)
    i0, i1, i2 = s.split(loop, [32, 8, 4])
    s.parallelize(i0)
    s.vectorize(i2)
    return s.program, s.trace()


def test_replay_follow_reproduces_program():
    p = ls.relu1d(1024)
    target, t = _record_split_parallel_vectorize(p)
    replayed, t2 = replay(p, t, mode="follow")
    assert ls.structural_equal(target, replayed)
    assert t.instructions == t2.instructions
    assert t2.validated


def test_empty_trace_replays_to_workload():
    p = ls.gmm(8, 8, 8)
    out, t = replay(p, Trace(()), mode="follow")
    assert ls.structural_equal(out, p)
    assert trace_prior(t) == 0.0


def test_resample_varies_decisions():
    p = ls.dense_relu(16, 16, 16)
    _, t = run_generator(p, ls.default_space(), seed=0)
    differing = 0
    for seed in range(20):
        _, ta = replay(p, t, mode="resample", seed=2 * seed)
        _, tb = replay(p, t, mode="resample", seed=2 * seed + 1)
        da = [i.decision for i in ta.instructions if i.decision is not None]
        db = [i.decision for i in tb.instructions if i.decision is not None]
        if da != db:
            differing += 1
    assert differing >= 1


def test_serialize_roundtrip():
    p = ls.dense_relu(16, 16, 16)
    _, t = run_generator(p, ls.default_space(), seed=1)
    t = Trace(t.instructions, workload_hash=ls.structural_hash(p))
    text = serialize_trace(t)
    t2 = deserialize_trace(text)
    assert t2.instructions == t.instructions
    assert t2.workload_hash == t.workload_hash


def test_serialize_empty_trace():
    t = Trace(())
    assert serialize_trace(t) == ""
    t2 = deserialize_trace("")
    assert t2.instructions == ()


def test_deserialize_reports_line_numbers():
    p = ls.relu1d(64)
    _, t = run_generator(p, ls.default_space(), seed=0)
    text = serialize_trace(t)
    lines = text.splitlines()
    lines[1] = "{broken json"
    with pytest.raises(TraceParseError) as e:
        deserialize_trace("\n".join(lines))
    assert e.value.line == 2


def test_deserialize_rejects_forward_references():
    text = '{"op": "get_loops", "inputs": ["%9"], "attrs": {}, "outputs": []}'
    with pytest.raises(TraceParseError, match="before definition"):
        deserialize_trace(text)


def test_deserialize_rejects_misplaced_decision():
    text = '{"op": "split", "inputs": [], "attrs": {}, "outputs": [], "decision": {"x": 1}}'
    with pytest.raises(TraceParseError, match="sampling"):
        deserialize_trace(text)


def test_workload_hash_mismatch_refused():
    p = ls.relu1d(64)
    _, t = run_generator(p, ls.default_space(), seed=0)
    t = Trace(t.instructions, workload_hash=ls.structural_hash(p))
    other = ls.relu1d(128)
    with pytest.raises(ReplayError, match="different workload"):
        replay(other, t, mode="follow")


def test_roundtrip_and_replay_random_traces(rng):
    for _ in range(100):
        e0, program, t = random_transformed(rng)
        t2 = deserialize_trace(serialize_trace(t))
        assert t2.instructions == t.instructions
        replayed, _ = replay(e0, t2, mode="follow")
        assert ls.structural_equal(replayed, program)


# ---------------------------------------------------------------------------
# mutation
# ---------------------------------------------------------------------------

def _tile_trace(extent=12):
    p = ls.relu1d(extent)
    s = ScheduleState(p, seed=0)
    b, = s.get_blocks()
    loop, = s.get_loops(b)
    refs = s.sample_perfect_tile(loop, 2)
    s.split(loop, refs)
    return p, s.trace()


def test_mutate_changes_decision_within_domain():
    p, t = _tile_trace(12)
    rng = random.Random(0)
    original = next(i.decision["tile"] for i in t.instructions
                    if i.op == "sample_perfect_tile")
    seen = set()
    for _ in range(30):
        t2, idx = mutate(t, rng)
        assert idx is not None
        new = next(i.decision["tile"] for i in t2.instructions
                   if i.op == "sample_perfect_tile")
        assert tuple(new) != tuple(original)
        assert math.prod(new) == 12
        seen.add(tuple(new))
        assert isinstance(validate_trace(p, t2), Accepted)
    assert len(seen) >= 3


def test_mutate_singleton_domains_flagged():
    p, t = _tile_trace(1)  # only factorization of 1 is (1, 1)
    t2, idx = mutate(t, random.Random(0))
    assert idx is None
    assert t2.instructions == t.instructions


def test_mutate_no_sampling_instructions():
    p = ls.relu1d(64)
    _, t = _record_split_parallel_vectorize_no_sampling(p)
    t2, idx = mutate(t, random.Random(0))
    assert idx is None


def _record_split_parallel_vectorize_no_sampling(p):
    s = ScheduleState(p, seed=0)
    b, = s.get_blocks()
    loop, = s.get_loops(b)
    s.split(loop, [16, 4])
    return s.program, s.trace()


def test_mutated_location_type_mismatch_rejected():
    # force a compute-location decision onto the 'inline' slot while the
    # recorded compute_at instruction still expects a loop: validator rejects
    p = ls.dense_relu(8, 8, 8)
    s = ScheduleState(p, seed=0)
    dense, relu = s.get_blocks()
    li, lj, lk = s.get_loops(dense)
    i0, i1 = s.split(li, [2, 4])
    j0, j1 = s.split(lj, [2, 4])
    s.reorder([i0, j0, i1, j1, lk])
    loc = s.sample_compute_location(relu, _decision=3)  # a loop slot
    s.compute_at(relu, loc)
    t = s.trace()
    pos = next(i for i, ins in enumerate(t.instructions)
               if ins.op == "sample_compute_location")
    forced = list(t.instructions)
    from dataclasses import replace as dc_replace
    forced[pos] = dc_replace(forced[pos],
                             decision={"index": 1, "size": 6})  # 'inline'
    verdict = validate_trace(p, Trace(tuple(forced)))
    assert isinstance(verdict, Rejected)
    assert verdict.index > pos


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_validate_accepts_sampled_split():
    p = ls.relu1d(1024)
    s = ScheduleState(p, seed=0)
    b, = s.get_blocks()
    loop, = s.get_loops(b)
    refs = s.sample_perfect_tile(loop, 3, _decision=[32, 8, 4])
    s.split(loop, refs)
    verdict = validate_trace(p, s.trace())
    assert isinstance(verdict, Accepted)
    extents = [l.extent for _, l in ir.iter_stmts(verdict.program.root)
               if isinstance(l, ir.Loop)]
    assert extents == [32, 8, 4]


def test_validate_rejects_bad_factorization():
    p = ls.relu1d(1024)
    s = ScheduleState(p, seed=0)
    b, = s.get_blocks()
    loop, = s.get_loops(b)
    refs = s.sample_perfect_tile(loop, 3, _decision=[32, 8, 4])
    s.split(loop, refs)
    t = s.trace()
    pos = next(i for i, ins in enumerate(t.instructions)
               if ins.op == "sample_perfect_tile")
    from dataclasses import replace as dc_replace
    forced = list(t.instructions)
    forced[pos] = dc_replace(forced[pos],
                             decision={"tile": [32, 8, 5], "size": 66})
    verdict = validate_trace(p, Trace(tuple(forced)))
    assert isinstance(verdict, Rejected)
    assert verdict.index == pos
    assert "factorization" in verdict.reason


def test_validation_matches_replay_on_random_mutations(rng):
    accepted = rejected = 0
    for _ in range(150):
        e0, _, t = random_transformed(rng)
        t2, idx = mutate(t, rng)
        verdict = validate_trace(e0, t2)
        if isinstance(verdict, Accepted):
            accepted += 1
            prog, _ = replay(e0, t2, mode="follow")
            assert ls.structural_equal(prog, verdict.program)
        else:
            rejected += 1
            with pytest.raises(ReplayError) as e:
                replay(e0, t2, mode="follow")
            assert e.value.index == verdict.index
    assert accepted > 0


def test_mutation_closure_probability_positive():
    # a validated trace with a non-singleton domain mutates into an accepted
    # trace with positive probability
    p, t = _tile_trace(12)
    rng = random.Random(5)
    hits = sum(isinstance(validate_trace(p, mutate(t, rng)[0]), Accepted)
               for _ in range(50))
    assert hits > 0


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------

def test_prior_two_decisions():
    # domains of size 6 (extent 12) and 4 (extent 6) multiply to 24
    p = ls.gmm(12, 6, 4)
    s = ScheduleState(p, seed=0)
    b, = s.get_blocks()
    li, lj, lk = s.get_loops(b)
    ti = s.sample_perfect_tile(li, 2)
    s.split(li, ti)
    tj = s.sample_perfect_tile(lj, 2)
    s.split(lj, tj)
    t = s.trace()
    assert trace_prior(t) == pytest.approx(math.log(1 / 24))


def test_prior_requires_validation():
    p, t = _tile_trace(12)
    stale = Trace(t.instructions, validated=False)
    with pytest.raises(ValueError, match="validated"):
        trace_prior(stale)


def test_prior_sums_to_one_over_enumerated_space():
    g = ls.gmm(4, 4, 4)
    space = ls.enumerate_space(g, ls.compose([ls.multi_level_tiling("SSRR")]),
                               cap=10_000)
    total = sum(math.exp(t.prior_log_prob()) for t in space.traces)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_prior_sums_to_one_with_state_dependent_domains():
    p = ls.dense_relu(4, 4, 4)
    gen = ls.compose([ls.multi_level_tiling("SSR"), ls.auto_inline()])
    space = ls.enumerate_space(p, gen, cap=100_000)
    total = sum(math.exp(t.prior_log_prob()) for t in space.traces)
    assert total == pytest.approx(1.0, abs=1e-9)
