"""Shared helpers: independent reference implementations (oracles) and
random-program generation used across the suite."""

import math
import random

import numpy as np
import pytest

import loopsched as ls
from loopsched.spaces import run_generator


# ---------------------------------------------------------------------------
# Independent oracles (plain loops, no loopsched machinery)
# ---------------------------------------------------------------------------

def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            acc = 0
            for kk in range(k):
                acc += int(a[i, kk]) * int(b[kk, j])
            out[i, j] = acc
    return out


def naive_relu(x):
    flat = x.reshape(-1)
    out = np.array([v if v > 0 else 0 for v in flat.tolist()], dtype=np.int64)
    return out.reshape(x.shape)


def naive_conv1d(x, w, stride, padding):
    in_ch, length = x.shape
    out_ch, in_ch2, kernel = w.shape
    assert in_ch == in_ch2
    out_len = (length + 2 * padding - kernel) // stride + 1
    out = np.zeros((out_ch, out_len), dtype=np.int64)
    for oc in range(out_ch):
        for ow in range(out_len):
            acc = 0
            for ic in range(in_ch):
                for kw in range(kernel):
                    pos = ow * stride + kw - padding
                    if 0 <= pos < length:
                        acc += int(x[ic, pos]) * int(w[oc, ic, kw])
            out[oc, ow] = acc
    return out


def brute_factorizations(extent, n):
    """All ordered n-tuples of positive ints with the given product, by
    direct filtering (independent of the library's enumerator)."""
    import itertools
    divs = [d for d in range(1, extent + 1) if extent % d == 0]
    return sorted(t for t in itertools.product(divs, repeat=n)
                  if math.prod(t) == extent)


# ---------------------------------------------------------------------------
# Random transformed programs
# ---------------------------------------------------------------------------

SMALL_WORKLOADS = [
    lambda: ls.relu1d(48),
    lambda: ls.gmm(8, 8, 8),
    lambda: ls.gmm(12, 6, 4),
    lambda: ls.dense_relu(8, 8, 8),
    lambda: ls.conv1d(12, 2, 3, 3, 1, 1),
]


def random_transformed(rng: random.Random, workloads=None):
    """(workload, program, trace) from one stochastic run of the default
    composed space over a randomly drawn small workload."""
    builders = workloads or SMALL_WORKLOADS
    e0 = builders[rng.randrange(len(builders))]()
    program, trace = run_generator(e0, ls.default_space(), rng.randrange(2 ** 62))
    return e0, program, trace


def assert_outputs_equal(p_ref, p_new, seeds=(0,)):
    for seed in seeds:
        inputs = ls.random_inputs(p_ref, seed)
        assert ls.outputs_equal(ls.run(p_ref, inputs), ls.run(p_new, inputs)), \
            f"interpreter outputs differ at seed {seed}"


@pytest.fixture
def rng():
    return random.Random(1234)
