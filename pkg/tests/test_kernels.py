import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqfpn import _kernels_py, kernels
from eqfpn.numerics import RngStream

compiled = pytest.importorskip("eqfpn._kernels", reason="compiled kernels not built")


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 20), n=st.integers(1, 40), scale=st.floats(0.01, 100), seed=st.integers(0, 2**31))
def test_simplex_backends_agree(m, n, scale, seed):
    Z = RngStream(seed, "k").generator.normal(scale=scale, size=(m, n))
    xc, tc = compiled.project_simplex_rows(Z)
    xp, tp = _kernels_py.project_simplex_rows(Z)
    np.testing.assert_allclose(xc, xp, atol=1e-12 * max(1.0, scale))
    np.testing.assert_allclose(tc, tp, atol=1e-12 * max(1.0, scale))


def test_simplex_ties_and_constant_rows():
    Z = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [5.0, 5.0, -5.0], [0.3, 0.3, 0.4]])
    xc, _ = compiled.project_simplex_rows(Z)
    xp, _ = _kernels_py.project_simplex_rows(Z)
    np.testing.assert_allclose(xc, xp, atol=1e-15)
    np.testing.assert_allclose(xc.sum(axis=1), 1.0)


@settings(max_examples=40, deadline=None)
@given(b=st.integers(1, 6), k=st.integers(1, 5), n=st.integers(1, 12), alpha=st.floats(0.01, 2),
       seed=st.integers(0, 2**31))
def test_minkowski_step_backends_agree(b, k, n, alpha, seed):
    g = RngStream(seed, "m").generator
    z, x, grad = g.normal(size=(b, k, n)), g.normal(size=(b, k, n)), g.normal(size=(b, n))
    zc, rc = compiled.minkowski_orthant_step(z, x, grad, alpha)
    zp, rp = _kernels_py.minkowski_orthant_step(z, x, grad, alpha)
    np.testing.assert_allclose(zc, zp, atol=1e-13)
    np.testing.assert_allclose(rc, rp, rtol=1e-12, atol=1e-13)


def test_pure_python_env_forces_fallback():
    env = dict(os.environ, EQFPN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import eqfpn.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_default_backend_is_compiled():
    if os.environ.get("EQFPN_PURE_PYTHON") in ("1", "true", "yes"):
        pytest.skip("fallback forced by environment")
    assert kernels.BACKEND == "cython"
