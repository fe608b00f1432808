import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celltissue import _kernels

compiled = _kernels.compiled
fallback = _kernels.fallback
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


@needs_compiled
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 6))
def test_nms_backends_agree(seed, d):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 40, 2)
    n = int(rng.integers(0, 60))
    rows = rng.integers(0, h, n).astype(np.int64)
    cols = rng.integers(0, w, n).astype(np.int64)
    np.testing.assert_array_equal(compiled.greedy_nms(rows, cols, d, int(h), int(w)),
                                  fallback.greedy_nms(rows, cols, d, int(h), int(w)))


@needs_compiled
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([0.0, 3.0, 15.0]))
def test_match_backends_agree(seed, radius):
    rng = np.random.default_rng(seed)
    nd, ng = rng.integers(0, 12, 2)
    args = (rng.integers(0, 50, nd).astype(float), rng.integers(0, 50, nd).astype(float),
            rng.integers(1, 3, nd).astype(np.int64), rng.integers(0, 50, ng).astype(float),
            rng.integers(0, 50, ng).astype(float), rng.integers(1, 3, ng).astype(np.int64))
    for a, b in zip(compiled.greedy_match(*args, radius), fallback.greedy_match(*args, radius)):
        np.testing.assert_array_equal(a, b)


@needs_compiled
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([0.5, 3.0, 7.0]))
def test_rasterize_backends_agree(seed, radius):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 8))
    xs, ys = rng.uniform(0, 32, n), rng.uniform(0, 32, n)
    cls = rng.integers(1, 3, n).astype(np.int64)
    np.testing.assert_array_equal(compiled.rasterize_disks(xs, ys, cls, 32, radius),
                                  fallback.rasterize_disks(xs, ys, cls, 32, radius))


def test_env_var_selects_fallback():
    code = "from celltissue import _kernels; print(_kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                         env={"CELLTISSUE_PURE_PYTHON": "1", "PATH": ""})
    assert out.stdout.strip() == "python"


def test_backend_name():
    assert _kernels.BACKEND == ("cython" if compiled is not None else "python")
