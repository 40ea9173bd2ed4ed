import os
import subprocess
import sys

import numpy as np
import pytest

from objnovelty import kernels
from objnovelty._accel import NUMBA_ENABLED

needs_numba = pytest.mark.skipif(not NUMBA_ENABLED, reason="numba disabled")


@needs_numba
@pytest.mark.parametrize("shape", [(1, 2), (7, 3), (32, 8), (50, 5)])
def test_sinkhorn_numba_matches_numpy(shape, rng):
    logits = rng.normal(size=shape) * 10
    q1, r1, i1 = kernels.sinkhorn_scale_numba(logits, 50, 0.0)
    q2, r2, i2 = kernels.sinkhorn_scale_numpy(logits, 50, 0.0)
    np.testing.assert_allclose(q1, q2, rtol=1e-10, atol=1e-12)
    assert i1 == i2 == 50
    assert r1 == pytest.approx(r2, rel=1e-6, abs=1e-12)


@needs_numba
def test_bilinear_numba_matches_numpy(rng):
    grid = rng.random((5, 6, 3))
    ys = rng.uniform(-1, 6, size=7)
    xs = rng.uniform(-1, 7, size=4)
    np.testing.assert_allclose(kernels.bilinear_grid_numba(grid, ys, xs),
                               kernels.bilinear_grid_numpy(grid, ys, xs), atol=1e-14)


@needs_numba
def test_rank_sum_numba_matches_numpy(rng):
    for _ in range(50):
        scores = rng.integers(0, 5, size=rng.integers(2, 40)).astype(float)
        pos = rng.random(len(scores)) < 0.5
        assert kernels.positive_rank_sum_numba(scores, pos) == kernels.positive_rank_sum_numpy(scores, pos)


def test_rank_sum_average_ties():
    # ranks: 1, 2.5, 2.5, 4
    scores = np.array([0.1, 0.5, 0.5, 0.9])
    assert kernels.positive_rank_sum(scores, np.array([False, True, False, True])) == 6.5


def test_sinkhorn_early_stop_reports_iterations(rng):
    q, residual, iters = kernels.sinkhorn_scale(rng.normal(size=(10, 4)), 10000, 1e-10)
    assert residual <= 1e-10
    assert iters < 10000


def test_numpy_fallback_selected_by_env_flag():
    code = ("import objnovelty._accel as a, objnovelty.kernels as k, numpy as np;"
            "print(a.NUMBA_ENABLED, k.sinkhorn_scale(np.zeros((2, 2)), 3)[0].sum())")
    env = dict(os.environ, OBJNOVELTY_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "2.0"]
