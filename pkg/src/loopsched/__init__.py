"""loopsched: loop-nest tensor programs, stochastic schedule transformations,
trace machinery, composable search spaces, a simulated machine model, and a
learning-driven autotuner."""

from .ir import (Buffer, Compute, IntConst, Intrinsic, Load, Loop, Select,
                 TensorProgram, Var, deserialize, pretty_print, serialize,
                 structural_equal, structural_hash, validate_ir)
from .interp import TensorValue, outputs_equal, random_inputs, run, run_reference
from .schedule import (BlockRef, LoopRef, RandomVarRef, ScheduleError,
                       ScheduleState, ordered_factorizations)
from .trace import (Accepted, Instruction, Rejected, ReplayError, Trace,
                    deserialize_trace, mutate, replay, serialize_trace,
                    trace_prior, validate_trace)
from .spaces import (DesignSpace, TransformationModule, auto_inline, compose,
                     default_space, default_space_config, enumerate_space,
                     generate_space, multi_level_tiling,
                     parallelize_vectorize_unroll, sample_traces,
                     space_from_config, use_tensor_unit)
from .machine import MachineSpec, footprint, simulate_latency
from .costmodel import CostModel, featurize, fit, spearman, unfit_model
from .search import (SearchConfig, SearchState, TuningRecord, TuningReport,
                     evolve, load_records, mh_accept, posterior_score,
                     save_records, tune)
from .workloads import REGISTRY, build_workload, conv1d, dense_relu, gmm, relu1d

__version__ = "0.1.0"
