import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from mulan import _accel as A

needs_numba = pytest.mark.skipif(not A.HAS_NUMBA, reason="numba not installed")


@pytest.mark.parametrize("use_numba", [False, pytest.param(True, marks=needs_numba)])
def test_gamma_distribution(use_numba):
    for shape in (1 / 15, 0.5, 2.5):
        x = A.standard_gamma(shape, (50_000,), np.random.default_rng(0), use_numba)
        assert stats.kstest(x, stats.gamma(shape).cdf).pvalue > 1e-3


@needs_numba
def test_gamma_paths_agree_to_rounding():
    a = A.standard_gamma(1 / 15, (10_000,), np.random.default_rng(1), True)
    b = A.standard_gamma(1 / 15, (10_000,), np.random.default_rng(1), False)
    assert np.allclose(a, b, rtol=1e-12, atol=0)


@needs_numba
def test_topk_and_truncnorm_paths_bit_identical():
    s = np.random.default_rng(2).standard_normal((500, 50))
    s[0, :3] = 1.0  # ties go to the lowest index in both paths
    assert np.array_equal(A.topk_rows(s, 15, True), A.topk_rows(s, 15, False))
    a = A.truncated_normal((1000,), 3.0, np.random.default_rng(3), True)
    b = A.truncated_normal((1000,), 3.0, np.random.default_rng(3), False)
    assert a.tobytes() == b.tobytes()


def test_validation():
    with pytest.raises(ValueError):
        A.standard_gamma(0.0, (3,), np.random.default_rng(0))
    with pytest.raises(ValueError):
        A.topk_rows(np.ones(3), 1)
    with pytest.raises(ValueError):
        A.topk_rows(np.ones((2, 3)), 4)


def test_env_flag_disables_jit():
    env = dict(os.environ, MULAN_NO_JIT="1")
    out = subprocess.run([sys.executable, "-c", "from mulan import _accel; print(_accel.USE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
