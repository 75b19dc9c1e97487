import os
import subprocess
import sys

import numpy as np
import pytest

from gfemamba import kernels
from oracles import sequential_scan_reference


def _inputs(rng, nb=2, L=9, di=5, S=4, dtype=np.float64):
    u = rng.standard_normal((nb, L, di))
    delta = np.log1p(np.exp(rng.standard_normal((nb, L, di))))
    A = -rng.random((di, S)) * 2
    B = rng.standard_normal((nb, L, S))
    C = rng.standard_normal((nb, L, S))
    D = rng.standard_normal(di)
    return [a.astype(dtype) for a in (u, delta, A, B, C, D)]


@pytest.mark.parametrize("fwd", [kernels.scan_forward_numpy, kernels.scan_forward_numba])
def test_forward_matches_scalar_loop(fwd):
    args = _inputs(np.random.default_rng(0))
    y, hs = fwd(*args)
    u, delta, A, B, C, D = args
    for b in range(u.shape[0]):
        ref = sequential_scan_reference(u[b], delta[b], A, B[b], C[b], D)
        assert np.allclose(y[b], ref, rtol=0, atol=1e-12)
    assert hs.shape == (2, 9, 5, 4)


def test_backends_agree_forward_and_backward():
    rng = np.random.default_rng(1)
    args = _inputs(rng, nb=3, L=17, di=6, S=5)
    y1, hs1 = kernels.scan_forward_numpy(*args)
    y2, hs2 = kernels.scan_forward_numba(*args)
    assert np.allclose(y1, y2, atol=1e-13) and np.allclose(hs1, hs2, atol=1e-13)
    gy = rng.standard_normal(y1.shape)
    for a, b in zip(kernels.scan_backward_numpy(gy, *args, hs1), kernels.scan_backward_numba(gy, *args, hs1)):
        assert np.allclose(a, b, atol=1e-12)


def test_float32_kernels_keep_dtype():
    args = _inputs(np.random.default_rng(2), dtype=np.float32)
    y, hs = kernels.scan_forward(*args)
    assert y.dtype == np.float32 and hs.dtype == np.float32


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, GFEMAMBA_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from gfemamba import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
