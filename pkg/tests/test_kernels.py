import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackop import _pykernels as py
from stackop import kernels

cy = pytest.importorskip("stackop._ckernels")


def test_backend_is_compiled():
    assert kernels.BACKEND == "cython"


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_haar_wiener_parity(P, level, seed):
    M = 16
    dw = np.random.default_rng(seed).normal(size=(P, M))
    width = M >> level
    lo = 0 if level == 0 else width
    lo = min(lo, M - width)
    mid, hi = lo + width // 2, lo + width
    amp = 2.0 ** (level / 2)
    np.testing.assert_allclose(cy.haar_wiener(dw, lo, mid, hi, amp), py.haar_wiener(dw, lo, mid, hi, amp), rtol=1e-13, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=3), st.integers(0, 2**31 - 1))
def test_hermite_chaos_parity(degrees, seed):
    xi = np.random.default_rng(seed).normal(size=(50, len(degrees)))
    np.testing.assert_allclose(cy.hermite_chaos(xi, degrees), py.hermite_chaos(xi, degrees), rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(2, 60), st.integers(0, 2**31 - 1))
def test_gram_parity(n, P, seed):
    r = np.random.default_rng(seed)
    tp = r.normal(size=(n, 8))
    ch = r.normal(size=(n, P))
    g1, s1 = cy.gram_separable(tp, ch, 0.125)
    g2, s2 = py.gram_separable(tp, ch, 0.125)
    np.testing.assert_allclose(g1, g2, rtol=1e-11, atol=1e-13)
    np.testing.assert_allclose(s1, s2, rtol=1e-8, atol=1e-13)


def test_pathwise_inner_parity(rng):
    u = rng.normal(size=(7, 16, 3))
    v = rng.normal(size=(7, 16, 3))
    np.testing.assert_allclose(cy.pathwise_inner(u, v, 0.1), py.pathwise_inner(u, v, 0.1), rtol=1e-13)


def test_wrappers_accept_readonly_and_strided(rng):
    dw = rng.normal(size=(5, 32))[:, ::2]
    dw.setflags(write=False)
    out = kernels.haar_wiener(dw, 0, 8, 16, 1.0)
    np.testing.assert_allclose(out, dw[:, :8].sum(1) - dw[:, 8:].sum(1))


def test_pure_python_fallback_selected_by_env():
    import subprocess
    import sys

    code = "import stackop.kernels as k; print(k.BACKEND)"
    env = {"STACKOP_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
