"""Learning-driven search: evolutionary exploration over traces with
annealed Metropolis-Hastings acceptance on the learned cost model,
measurement on the simulated machine, and MAP-objective reporting."""

from __future__ import annotations

import json
import math
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import ir
from .costmodel import CostModel, featurize, fit, spearman, unfit_model
from .ir import TensorProgram
from .machine import MachineSpec, simulate_latency
from .spaces import DesignSpace, TransformationModule, generate_space
from .trace import (Rejected, ReplayError, Trace, mutate, replay,
                    serialize_trace, trace_prior, validate_trace)

# resample attempts before judging a small space exhausted; generous so that
# coverage-style runs find the last few programs with high probability
EXHAUSTION_ATTEMPTS = 4000


@dataclass(frozen=True)
class SearchConfig:
    trials: int = 512
    batch: int = 16
    population: int = 64
    generations: int = 4
    init_temperature: float = 1.0
    anneal: float = 0.85
    epsilon: float = 0.05
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        for name in ("trials", "batch", "population", "generations", "jobs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.init_temperature <= 0:
            raise ValueError("init_temperature must be positive")
        if not 0 < self.anneal < 1:
            raise ValueError("anneal must be in (0, 1)")
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must be in [0, 1)")


@dataclass
class TuningRecord:
    trace: Trace
    latency: Fraction
    features: np.ndarray
    program_hash: int


@dataclass
class Candidate:
    trace: Trace
    program: TensorProgram
    program_hash: int
    features: np.ndarray
    predicted: float


@dataclass
class SearchState:
    measured: dict[int, TuningRecord] = field(default_factory=dict)
    best: Optional[tuple[TuningRecord, TensorProgram]] = None
    model: CostModel = field(default_factory=unfit_model)
    rounds: int = 0


def posterior_score(e0: TensorProgram, t: Trace, f_latency, f_min) -> float:
    """Log of the unnormalized posterior: latency normalized by the incumbent
    best (so the exponential is scale-free) plus the trace's log prior."""
    if float(f_min) <= 0:
        raise ValueError("f_min must be positive")
    return -(float(f_latency) / float(f_min)) + trace_prior(t)


def mh_accept(old_pred: float, new_pred: float, temperature: float,
              rng: random.Random) -> bool:
    """Accept with probability min(1, exp(((old - new) / old) / temperature));
    improvements always pass."""
    if old_pred <= 0 or new_pred <= 0 or temperature <= 0:
        raise ValueError("predictions and temperature must be positive")
    if new_pred < old_pred:
        return True
    prob = math.exp(((old_pred - new_pred) / old_pred) / temperature)
    return rng.random() < prob


class _Validator:
    """validate_trace with memoization keyed by the serialized trace."""

    def __init__(self, e0: TensorProgram, machine_spec: MachineSpec):
        self.e0 = e0
        self.machine_spec = machine_spec
        self.cache: dict[str, Optional[Candidate]] = {}
        self.features_by_hash: dict[int, np.ndarray] = {}

    def _predict(self, program: TensorProgram, features: np.ndarray,
                 model: CostModel) -> float:
        return model.predict_features(features)

    def candidate(self, t: Trace, model: CostModel) -> Optional[Candidate]:
        key = serialize_trace(t)
        if key in self.cache:
            return self._revive(self.cache[key], model)
        verdict = validate_trace(self.e0, t)
        if isinstance(verdict, Rejected):
            self.cache[key] = None
            return None
        return self._store(key, verdict.trace, verdict.program, model)

    def from_replay(self, t: Trace, program, model: CostModel) -> Candidate:
        """Cache a candidate whose replay already succeeded (no revalidation)."""
        key = serialize_trace(t)
        cand = self.cache.get(key)
        if cand is not None:
            return self._revive(cand, model)
        return self._store(key, t, program, model)

    def _revive(self, cand: Optional[Candidate], model) -> Optional[Candidate]:
        if cand is None:
            return None
        return Candidate(cand.trace, cand.program, cand.program_hash, cand.features,
                         self._predict(cand.program, cand.features, model))

    def _store(self, key, t: Trace, program, model: CostModel) -> Candidate:
        h = ir.structural_hash(program)
        feats = self.features_by_hash.get(h)
        if feats is None:
            feats = featurize(program, self.machine_spec)
            self.features_by_hash[h] = feats
        cand = Candidate(t, program, h, feats,
                         self._predict(program, feats, model))
        self.cache[key] = cand
        return cand


def _fresh_candidate(space: DesignSpace, validator: _Validator, model: CostModel,
                     rng: random.Random) -> Optional[Candidate]:
    if not space.traces:
        return None
    t = space.traces[rng.randrange(len(space.traces))]
    try:
        program, resampled = replay(space.workload, t, mode="resample",
                                    seed=rng.randrange(2 ** 62))
    except ReplayError:
        return None
    return validator.from_replay(resampled, program, model)


def evolve(e0: TensorProgram, state: SearchState, space: DesignSpace,
           config: SearchConfig, rng: random.Random,
           validator: Optional[_Validator] = None,
           machine_spec: MachineSpec = MachineSpec(),
           batch: Optional[int] = None) -> tuple[list[Candidate], bool]:
    """One round of evolutionary proposal. Returns up to ``batch`` validated,
    unmeasured candidates ranked by predicted latency, and a flag that is
    True when the space appears exhausted (fewer than requested found)."""
    if validator is None:
        validator = _Validator(e0, machine_spec)
    model = state.model
    b = batch if batch is not None else config.batch

    population: list[Candidate] = []
    top = sorted(state.measured.values(), key=lambda r: r.latency)
    for rec in top[:config.population]:
        cand = validator.candidate(rec.trace, model)
        if cand is not None:
            population.append(cand)
    fill_attempts = 0
    while len(population) < config.population and fill_attempts < 4 * config.population:
        fill_attempts += 1
        cand = _fresh_candidate(space, validator, model, rng)
        if cand is not None:
            population.append(cand)
    if not population:
        for t in space.traces:
            cand = validator.candidate(t, model)
            if cand is not None:
                population.append(cand)
    if not population:
        return [], True

    for g in range(config.generations):
        temperature = config.init_temperature * config.anneal ** g
        for i, member in enumerate(population):
            proposal, mutated = mutate(member.trace, rng)
            if mutated is None:
                continue
            cand = validator.candidate(proposal, model)
            if cand is None:
                continue  # rejected by the validator; member retained
            if mh_accept(member.predicted, cand.predicted, temperature, rng):
                population[i] = cand

    ranked = sorted(population, key=lambda c: (c.predicted, c.program_hash))
    chosen: list[Candidate] = []
    taken: set[int] = set()
    for cand in ranked:
        if cand.program_hash in state.measured or cand.program_hash in taken:
            continue
        chosen.append(cand)
        taken.add(cand.program_hash)
        if len(chosen) == b:
            break

    # epsilon-greedy substitution for coverage
    pool = {}
    for cand in population:
        if cand.program_hash not in state.measured:
            pool.setdefault(cand.program_hash, cand)
    for slot in range(len(chosen)):
        if rng.random() < config.epsilon:
            alts = [c for h, c in sorted(pool.items())
                    if h not in taken or h == chosen[slot].program_hash]
            alts = [c for c in alts if c.program_hash != chosen[slot].program_hash]
            if alts:
                pick = alts[rng.randrange(len(alts))]
                taken.discard(chosen[slot].program_hash)
                chosen[slot] = pick
                taken.add(pick.program_hash)

    # fall back to fresh resampling when the population cannot supply a full
    # batch of unmeasured programs
    attempts = 0
    while len(chosen) < b and attempts < EXHAUSTION_ATTEMPTS:
        attempts += 1
        cand = _fresh_candidate(space, validator, model, rng)
        if cand is None:
            continue
        if cand.program_hash in state.measured or cand.program_hash in taken:
            continue
        chosen.append(cand)
        taken.add(cand.program_hash)
    return chosen, len(chosen) < b


def _measure_batch(candidates, machine_spec: MachineSpec, jobs: int):
    """Simulate a batch; measurements are pure, so a worker pool only changes
    wall time, never results (outputs stay in candidate order)."""
    if jobs > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(
                lambda c: simulate_latency(c.program, machine_spec), candidates))
    return [simulate_latency(c.program, machine_spec) for c in candidates]


@dataclass
class TuningReport:
    workload_hash: int
    seed: int
    baseline_latency: Fraction
    best: Optional[TuningRecord]
    best_program: Optional[TensorProgram]
    log: list[TuningRecord]
    model_spearman: Optional[float]
    posterior: Optional[float]
    rounds: int
    exhausted: bool

    @property
    def best_latency(self) -> Fraction:
        return self.best.latency if self.best else self.baseline_latency

    @property
    def speedup(self) -> float:
        return float(self.baseline_latency / self.best_latency)

    def to_json(self, timestamp: bool = True) -> dict:
        def trace_json(t: Trace):
            return {"workload_hash": t.workload_hash,
                    "instructions": [i.to_json() for i in t.instructions]}

        doc = {
            "workload": self.workload_hash,
            "seed": self.seed,
            "baseline": {"latency": float(self.baseline_latency),
                         "exact": str(self.baseline_latency)},
            "best": None,
            "log": [{"hash": r.program_hash, "latency": float(r.latency),
                     "exact": str(r.latency), "features": list(map(float, r.features)),
                     "trace": [i.to_json() for i in r.trace.instructions]}
                    for r in self.log],
            "model": {"spearman": self.model_spearman,
                      "records": len(self.log)},
            "posterior_score": self.posterior,
            "rounds": self.rounds,
            "exhausted": self.exhausted,
            "trials": len(self.log),
        }
        if self.best is not None:
            doc["best"] = {
                "latency": float(self.best.latency),
                "exact": str(self.best.latency),
                "speedup": self.speedup,
                "trace": trace_json(self.best.trace),
                "program": json.loads(ir.serialize(self.best_program)),
            }
        if timestamp:
            doc["timestamp"] = time.time()
        return doc


def tune(e0: TensorProgram, generator: TransformationModule,
         config: SearchConfig = SearchConfig(),
         machine_spec: MachineSpec = MachineSpec(),
         warm_records: Optional[list[TuningRecord]] = None) -> TuningReport:
    """Rounds of {evolve -> simulate -> record -> refit} until the trial
    budget is spent or the space is exhausted. Deterministic per
    (workload, generator, config, machine_spec, seed); interrupt-safe."""
    ir.check_valid(e0)
    rng = random.Random(config.seed)
    space = generate_space(e0, generator, k=config.population,
                           seed=rng.randrange(2 ** 62))
    baseline = simulate_latency(e0, machine_spec)
    state = SearchState(model=unfit_model(machine_spec=machine_spec))
    if warm_records:
        state.model = fit(state.model, [(r.features, r.latency) for r in warm_records])
    validator = _Validator(e0, machine_spec)
    log: list[TuningRecord] = []
    best_rec: Optional[TuningRecord] = None
    best_prog: Optional[TensorProgram] = None
    exhausted = False

    try:
        while len(state.measured) < config.trials:
            want = min(config.batch, config.trials - len(state.measured))
            candidates, short = evolve(e0, state, space, config, rng,
                                       validator=validator,
                                       machine_spec=machine_spec, batch=want)
            if not candidates:
                exhausted = True
                break
            latencies = _measure_batch(candidates, machine_spec, config.jobs)
            for cand, latency in zip(candidates, latencies):
                rec = TuningRecord(cand.trace, latency, cand.features,
                                   cand.program_hash)
                state.measured[cand.program_hash] = rec
                log.append(rec)
                if best_rec is None or latency < best_rec.latency:
                    best_rec, best_prog = rec, cand.program
            state.model = fit(state.model,
                              [(r.features, r.latency) for r in log])
            state.rounds += 1
            if short and len(state.measured) < config.trials:
                exhausted = True
                break
    except KeyboardInterrupt:
        pass

    model_rho = None
    if len(log) >= 3:
        preds = [state.model.predict_features(r.features) for r in log]
        actual = [float(r.latency) for r in log]
        if len(set(actual)) > 1:
            model_rho = spearman(preds, actual)
    posterior = None
    if best_rec is not None:
        posterior = posterior_score(e0, best_rec.trace, best_rec.latency,
                                    best_rec.latency)
    return TuningReport(
        workload_hash=ir.structural_hash(e0), seed=config.seed,
        baseline_latency=baseline, best=best_rec, best_program=best_prog,
        log=log, model_spearman=model_rho, posterior=posterior,
        rounds=state.rounds, exhausted=exhausted)


# ---------------------------------------------------------------------------
# Tuning-record files (JSON lines; reloadable to warm-start a model)
# ---------------------------------------------------------------------------

def save_records(path: str, records: list[TuningRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({
                "trace": [i.to_json() for i in r.trace.instructions],
                "latency": float(r.latency),
                "features": list(map(float, r.features)),
                "hash": r.program_hash,
            }, sort_keys=True) + "\n")


def load_records(path: str) -> list[TuningRecord]:
    from .trace import deserialize_trace
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            doc = json.loads(line)
            t = deserialize_trace("\n".join(json.dumps(i) for i in doc["trace"]))
            out.append(TuningRecord(t, Fraction(doc["latency"]).limit_denominator(10 ** 12),
                                    np.array(doc["features"]), doc.get("hash", 0)))
    return out
