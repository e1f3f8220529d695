"""Compiled and pure-python CTC kernels must agree bit-for-bit in contract."""

import numpy as np
import pytest

from vadasr import kernels
from vadasr.kernels import _ctc_py


def _random_logp(rng, T, K):
    logits = rng.normal(size=(T, K))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


def test_extend_with_blanks():
    ext = _ctc_py.extend_with_blanks(np.array([0, 1]), blank=2)
    assert list(ext) == [2, 0, 2, 1, 2]


@pytest.mark.skipif(kernels.BACKEND != "cython",
                    reason="compiled kernel unavailable")
def test_backends_agree(rng):
    for _ in range(100):
        T = int(rng.integers(1, 30))
        V = int(rng.integers(1, 5))
        logp = _random_logp(rng, T, V + 1)
        L = int(rng.integers(0, min(T, 6) + 1))
        targets = rng.integers(0, V, size=L)
        l1, g1 = kernels.ctc_forward_backward(logp, targets, V)
        l2, g2 = _ctc_py.ctc_forward_backward(logp, targets, V)
        if np.isinf(l1):
            assert np.isinf(l2)
            continue
        assert abs(l1 - l2) <= 1e-12 * max(1.0, abs(l2))
        assert np.allclose(g1, g2, atol=1e-12)


def test_infeasible_returns_inf(rng):
    logp = _random_logp(rng, 2, 3)
    loss, grad = kernels.ctc_forward_backward(logp, np.array([0, 0]), 2)
    assert np.isinf(loss)
    assert np.all(grad == 0.0)


def test_python_env_override(tmp_path):
    import subprocess
    import sys

    out = subprocess.run(
        [sys.executable, "-c",
         "from vadasr.kernels import BACKEND; print(BACKEND)"],
        env={"PATH": "/usr/bin:/bin", "VADASR_PURE_PYTHON": "1"},
        capture_output=True, text=True)
    assert out.stdout.strip() == "python"
