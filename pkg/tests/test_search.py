import json
import math
import random

import pytest

import loopsched as ls
from loopsched.machine import MachineSpec, simulate_latency
from loopsched.search import (SearchConfig, SearchState, _Validator, evolve,
                              mh_accept, posterior_score, tune)
from loopsched.spaces import enumerate_space, generate_space
from loopsched.trace import Trace, replay, validate_trace

SPEC = MachineSpec()


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(trials=0)
    with pytest.raises(ValueError):
        SearchConfig(anneal=1.0)
    with pytest.raises(ValueError):
        SearchConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        SearchConfig(init_temperature=0)


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------

def test_posterior_incumbent_is_minus_one():
    p = ls.gmm(8, 8, 8)
    _, t = replay(p, Trace(()), mode="follow")  # empty trace, prior 0
    assert posterior_score(p, t, 100.0, 100.0) == pytest.approx(-1.0)


def test_posterior_monotone_in_latency():
    p = ls.gmm(8, 8, 8)
    _, t = replay(p, Trace(()), mode="follow")
    assert posterior_score(p, t, 90.0, 80.0) > posterior_score(p, t, 100.0, 80.0)


def test_posterior_argmax_matches_latency_argmin():
    # equal priors across the enumerated tiling space: the highest posterior
    # is exactly the lowest-latency program
    g = ls.gmm(12, 12, 12)
    space = enumerate_space(g, ls.compose([ls.multi_level_tiling("SSRR")]),
                            cap=10 ** 5)
    entries = []
    for t in space.traces:
        prog, nt = replay(g, t, mode="follow")
        lat = simulate_latency(prog, SPEC)
        entries.append((lat, nt))
    f_min = min(e[0] for e in entries)
    scores = [posterior_score(g, nt, lat, f_min) for lat, nt in entries]
    priors = {round(nt.prior_log_prob(), 12) for _, nt in entries}
    assert len(priors) == 1  # uniform prior over this skeleton
    best_by_score = max(range(len(entries)), key=lambda i: scores[i])
    assert entries[best_by_score][0] == f_min


# ---------------------------------------------------------------------------
# Metropolis-Hastings
# ---------------------------------------------------------------------------

def test_mh_always_accepts_improvement():
    rng = random.Random(0)
    assert all(mh_accept(100.0, 90.0, t, rng) for t in (0.01, 1.0, 10.0))


def test_mh_acceptance_frequency_ten_percent_worse():
    rng = random.Random(0)
    n = 100_000
    hits = sum(mh_accept(100.0, 110.0, 1.0, rng) for _ in range(n))
    assert abs(hits / n - math.exp(-0.1)) < 0.005


def test_mh_freezes_at_low_temperature():
    rng = random.Random(0)
    n = 10_000
    hits = sum(mh_accept(100.0, 110.0, 0.01, rng) for _ in range(n))
    assert hits / n <= 0.01


def test_mh_rejects_bad_arguments():
    rng = random.Random(0)
    with pytest.raises(ValueError):
        mh_accept(0.0, 1.0, 1.0, rng)
    with pytest.raises(ValueError):
        mh_accept(1.0, 1.0, 0.0, rng)


# ---------------------------------------------------------------------------
# evolve
# ---------------------------------------------------------------------------

def test_evolve_singleton_space_then_exhaustion():
    g = ls.gmm(1, 1, 1)
    gen = ls.compose([ls.multi_level_tiling("SSRR")])
    rng = random.Random(0)
    config = SearchConfig(trials=4, batch=2, population=4)
    space = generate_space(g, gen, k=4, seed=0)
    state = SearchState()
    cands, short = evolve(g, state, space, config, rng)
    assert len(cands) == 1 and short
    c = cands[0]
    state.measured[c.program_hash] = ls.TuningRecord(
        c.trace, simulate_latency(c.program, SPEC), c.features, c.program_hash)
    cands2, short2 = evolve(g, state, space, config, rng)
    assert cands2 == [] and short2


def test_evolve_with_perfect_predictions_finds_optimum():
    # predict == simulate: 256-trial budget reaches the enumerated optimum
    g = ls.gmm(12, 12, 12)
    gen = ls.default_space()
    enum = enumerate_space(g, gen, cap=10 ** 5)
    best = None
    for t in enum.traces:
        prog, _ = replay(g, t, mode="follow")
        lat = simulate_latency(prog, SPEC)
        best = lat if best is None or lat < best else best

    class PerfectValidator(_Validator):
        def _predict(self, program, features, model):
            return float(simulate_latency(program, self.machine_spec))

    wins = 0
    for seed in range(10):
        rng = random.Random(seed)
        config = SearchConfig(trials=256, batch=16, population=32, seed=seed)
        space = generate_space(g, gen, k=32, seed=seed)
        state = SearchState()
        validator = PerfectValidator(g, SPEC)
        found = None
        while len(state.measured) < config.trials:
            cands, short = evolve(g, state, space, config, rng,
                                  validator=validator)
            if not cands:
                break
            for c in cands:
                lat = simulate_latency(c.program, SPEC)
                state.measured[c.program_hash] = ls.TuningRecord(
                    c.trace, lat, c.features, c.program_hash)
                found = lat if found is None or lat < found else found
            if short:
                break
        if found == best:
            wins += 1
    assert wins >= 9


# ---------------------------------------------------------------------------
# tune
# ---------------------------------------------------------------------------

def test_tune_singleton_space():
    g = ls.gmm(1, 1, 1)
    gen = ls.compose([ls.multi_level_tiling("SSRR")])
    report = tune(g, gen, SearchConfig(trials=8, batch=2, population=4, seed=0))
    assert len(report.log) == 1
    assert report.exhausted
    assert report.best_latency == simulate_latency(g, SPEC)


def test_tune_measured_traces_replay_to_measured_hash():
    g = ls.gmm(12, 12, 12)
    report = tune(g, ls.default_space(),
                  SearchConfig(trials=48, batch=8, population=16, seed=1))
    for rec in report.log:
        verdict = validate_trace(g, rec.trace)
        assert isinstance(verdict, ls.Accepted)
        assert ls.structural_hash(verdict.program) == rec.program_hash


def test_tune_best_non_increasing():
    g = ls.gmm(12, 12, 12)
    report = tune(g, ls.default_space(),
                  SearchConfig(trials=64, batch=8, population=16, seed=2))
    best = math.inf
    bests = []
    for rec in report.log:
        best = min(best, rec.latency)
        bests.append(best)
    assert bests == sorted(bests, reverse=True)
    assert report.best_latency == bests[-1]


def test_tune_no_duplicate_measurements():
    g = ls.gmm(12, 12, 12)
    report = tune(g, ls.default_space(),
                  SearchConfig(trials=64, batch=8, population=16, seed=3))
    hashes = [r.program_hash for r in report.log]
    assert len(hashes) == len(set(hashes))


def test_tune_coverage_small_space():
    # epsilon-greedy + resample fallback measures every distinct program
    p = ls.dense_relu(4, 4, 4)
    gen = ls.compose([ls.multi_level_tiling("SSR")])
    enum = enumerate_space(p, gen, cap=10 ** 5)
    all_hashes = enum.distinct_hashes()
    report = tune(p, gen, SearchConfig(trials=100_000, batch=8, population=16,
                                       epsilon=0.2, seed=0))
    assert {r.program_hash for r in report.log} == all_hashes


def test_tune_deterministic_reports():
    g = ls.gmm(12, 12, 12)
    cfg = SearchConfig(trials=48, batch=8, population=16, seed=5)
    a = tune(g, ls.default_space(), cfg).to_json(timestamp=False)
    b = tune(g, ls.default_space(), cfg).to_json(timestamp=False)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_tune_report_fields():
    g = ls.gmm(12, 12, 12)
    report = tune(g, ls.default_space(),
                  SearchConfig(trials=32, batch=8, population=16, seed=7))
    doc = report.to_json()
    assert "timestamp" in doc
    assert doc["best"]["latency"] <= doc["baseline"]["latency"]
    assert doc["best"]["speedup"] >= 1.0
    assert doc["model"]["records"] == len(report.log)
    assert report.posterior == pytest.approx(
        -1.0 + report.best.trace.prior_log_prob())
    prog = ls.deserialize(json.dumps(doc["best"]["program"]))
    assert ls.validate_ir(prog) == []


def test_save_and_load_records(tmp_path):
    g = ls.gmm(12, 12, 12)
    report = tune(g, ls.default_space(),
                  SearchConfig(trials=16, batch=8, population=16, seed=9))
    path = tmp_path / "records.jsonl"
    ls.save_records(str(path), report.log)
    loaded = ls.load_records(str(path))
    assert len(loaded) == len(report.log)
    assert [r.program_hash for r in loaded] == [r.program_hash for r in report.log]
    assert [r.trace.instructions for r in loaded] == \
        [r.trace.instructions for r in report.log]
    # warm-starting consumes the records
    r2 = tune(g, ls.default_space(),
              SearchConfig(trials=16, batch=8, population=16, seed=10),
              warm_records=loaded)
    assert len(r2.log) == 16
