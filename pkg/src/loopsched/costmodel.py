"""Learned latency proxy: fixed-length program features plus a ridge
regressor on log-latency, refit from scratch on every update (cheap at desk
scale and free of learning-rate tuning)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ir, machine
from .ir import Intrinsic, Loop, TensorProgram
from .machine import MachineSpec
from .schedule import INTRINSICS

N_FEATURES = 9


def featurize(p: TensorProgram, spec: MachineSpec = MachineSpec()) -> np.ndarray:
    """9 aggregate features over innermost statements:
    log1p(trip count), log1p(flops), vectorized/parallel fractions,
    log1p(hit accesses), log1p(miss accesses), unrolled fraction,
    tensor-unit call count, loop-nest depth."""
    total_trip = 0
    flops = 0
    vec_iters = par_iters = unr_iters = 0
    hits = misses = 0
    tensor_calls = 0
    depth = 0

    for path, stmt in ir.iter_stmts(p.root):
        if isinstance(stmt, Loop):
            continue
        loops = [l for _, l in ir.enclosing_loops(p.root, path)]
        trip = math.prod(l.extent for l in loops) if loops else 1
        kinds = {l.kind for l in loops}
        total_trip += trip
        depth = max(depth, len(loops))
        if "vectorized" in kinds:
            vec_iters += trip
        if "parallel" in kinds:
            par_iters += trip
        if "unrolled" in kinds:
            unr_iters += trip

        if isinstance(stmt, Intrinsic):
            info = INTRINSICS[stmt.name]
            flops += info.flops * trip
            hits += info.operand_elements * trip
            tensor_calls += trip
            continue

        red = ir.reduction_vars(stmt, [l.var for l in loops])
        red_trip = math.prod(l.extent for l in loops if l.var in red) if red else 1
        spatial_trip = trip // red_trip
        flops += trip * (ir.count_arith_ops(stmt.value) + (1 if stmt.init else 0))
        if stmt.init is not None:
            flops += spatial_trip * ir.count_arith_ops(stmt.init)
        if stmt.epilogue is not None:
            flops += spatial_trip * ir.count_arith_ops(stmt.epilogue)
        for _, phase, miss_frac in machine.classify_accesses(p, stmt, loops, spec):
            n = trip if phase == "main" else spatial_trip
            misses += float(miss_frac) * n
            hits += float(1 - miss_frac) * n

    frac = (lambda n: n / total_trip if total_trip else 0.0)
    return np.array([
        math.log1p(total_trip),
        math.log1p(flops),
        frac(vec_iters),
        frac(par_iters),
        math.log1p(hits),
        math.log1p(misses),
        frac(unr_iters),
        float(tensor_calls),
        float(depth),
    ])


@dataclass(frozen=True)
class CostModel:
    """Linear model on standardized features predicting log-latency."""

    ridge: float = 1e-6
    machine_spec: MachineSpec = field(default_factory=MachineSpec)
    weights: Optional[np.ndarray] = None
    intercept: float = 0.0
    feature_mean: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None
    n_records: int = 0
    degenerate: bool = False

    def is_fit(self) -> bool:
        return self.weights is not None

    def predict_features(self, features: np.ndarray) -> float:
        if not self.is_fit():
            return math.exp(self.intercept) if self.n_records else 1.0
        z = (features - self.feature_mean) / self.feature_scale
        return math.exp(float(z @ self.weights) + self.intercept)

    def predict(self, p: TensorProgram) -> float:
        return self.predict_features(featurize(p, self.machine_spec))


def unfit_model(warmup_latencies=None, ridge: float = 1e-6,
                machine_spec: MachineSpec = MachineSpec()) -> CostModel:
    """A constant predictor: geometric mean of any warm-up latencies, else 1."""
    if warmup_latencies:
        logs = [math.log(float(x)) for x in warmup_latencies]
        return CostModel(ridge=ridge, machine_spec=machine_spec,
                         intercept=sum(logs) / len(logs), n_records=len(logs))
    return CostModel(ridge=ridge, machine_spec=machine_spec)


def fit(model: CostModel, records) -> CostModel:
    """Ridge least squares on log-latency over (features, latency) pairs.
    Records are sorted canonically first so the fit is insensitive to
    arrival order."""
    if not records:
        raise ValueError("fit needs at least one record")
    ordered = sorted(records, key=lambda r: (float(r[1]), tuple(np.asarray(r[0]))))
    X = np.array([np.asarray(f, dtype=float) for f, _ in ordered])
    y = np.log(np.array([float(lat) for _, lat in ordered]))

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    informative = std > 0
    scale = np.where(informative, std, 1.0)
    Z = (X - mean) / scale
    y_mean = float(y.mean())
    yc = y - y_mean

    degenerate = not bool(informative.any())  # every feature constant
    gram = Z.T @ Z + model.ridge * np.eye(Z.shape[1])
    try:
        w = np.linalg.solve(gram, Z.T @ yc)
    except np.linalg.LinAlgError:
        w = np.zeros(Z.shape[1])
        degenerate = True
    if not np.all(np.isfinite(w)):
        w = np.zeros(Z.shape[1])
        degenerate = True
    if degenerate:
        w = np.zeros(Z.shape[1])
    return replace(model, weights=w, intercept=y_mean, feature_mean=mean,
                   feature_scale=scale, n_records=len(ordered),
                   degenerate=degenerate)


def spearman(pred, actual) -> float:
    import warnings

    from scipy import stats
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = stats.spearmanr(pred, actual).statistic
    return float(rho) if np.isfinite(rho) else 0.0
