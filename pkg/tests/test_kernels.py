"""Compiled and numpy kernels agree; analytic gradients match finite differences."""

import numpy as np
import pytest

from dynsurv import _pykernels
from dynsurv._backend import BACKEND, get_kernels
from dynsurv.cox import _sorted, lambda_path
from dynsurv.lmm import LmmSpec, _subject_stats, marginal_loglik

from conftest import toy_lmm_data

try:
    ck = get_kernels("compiled")
except ImportError:  # pragma: no cover - depends on the build
    ck = None

needs_compiled = pytest.mark.skipif(ck is None, reason="compiled extension not built")


def _cox_case(seed, n=60, p=5, ties=True):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    t = rng.exponential(size=n)
    if ties:
        t = np.round(t, 1) + 0.1
    e = (rng.uniform(size=n) < 0.7).astype(float)
    order, ev, gstart = _sorted(t, e)
    return np.asfortranarray(x[order]), ev, gstart


def _lmm_stats(seed):
    ds = toy_lmm_data(seed, n_subj=12, m=5)
    spec = LmmSpec("y", ("fuptime",), ("fuptime",))
    return _subject_stats(spec, ds.longitudinal, ds.ids)


def test_backend_name():
    assert BACKEND in ("python", "compiled")


@needs_compiled
@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_cox_path_parity(alpha):
    x, ev, g = _cox_case(1)
    lams = lambda_path(x, ev, g, alpha, 20)
    args = (x, ev, g, lams, alpha, np.zeros(x.shape[1]), 1e-10, 200, 10000)
    b_py, it_py = _pykernels.cox_path(*args)
    b_c, it_c = ck.cox_path(*args)
    assert np.max(np.abs(b_py - b_c)) < 1e-8
    assert np.all(it_py > 0) and np.all(it_c > 0)


@needs_compiled
def test_cox_loglik_parity():
    x, ev, g = _cox_case(2)
    eta = np.ascontiguousarray(x @ np.random.default_rng(0).standard_normal((x.shape[1], 4)))
    assert np.allclose(_pykernels.cox_loglik(eta, ev, g), ck.cox_loglik(eta, ev, g), rtol=1e-12, atol=1e-12)


@needs_compiled
def test_lmm_profile_parity():
    st = _lmm_stats(3)
    lam = np.array([[0.9, 0.0], [0.2, 0.4]])
    args = (st.ztz, st.ztw, st.zty, st.wtw, st.wty, st.yty, float(st.nobs), lam)
    d1, g1, b1, s1 = _pykernels.lmm_profile(*args)
    d2, g2, b2, s2 = ck.lmm_profile(*args)
    assert d1 == pytest.approx(d2, rel=1e-12)
    assert np.allclose(np.tril(g1), np.tril(g2), rtol=1e-9, atol=1e-10)
    assert np.allclose(b1, b2, rtol=1e-12)
    assert s1 == pytest.approx(s2, rel=1e-12)


@needs_compiled
def test_blup_parity():
    st = _lmm_stats(4)
    D = np.array([[1.0, 0.2], [0.2, 0.3]])
    ztr = np.ascontiguousarray(st.zty - st.ztw @ np.array([1.0, 0.5]))
    assert np.allclose(_pykernels.blup_batch(st.ztz, ztr, D, 0.3), ck.blup_batch(st.ztz, ztr, D, 0.3), atol=1e-13)


def test_profile_gradient_fd():
    st = _lmm_stats(5)
    lam = np.array([[0.8, 0.0], [0.3, 0.5]])

    def dev(L):
        return _pykernels.lmm_profile(st.ztz, st.ztw, st.zty, st.wtw, st.wty, st.yty, float(st.nobs), L)[0]

    _, g, _, _ = _pykernels.lmm_profile(st.ztz, st.ztw, st.zty, st.wtw, st.wty, st.yty, float(st.nobs), lam)
    h = 1e-6
    for i, j in [(0, 0), (1, 0), (1, 1)]:
        e = np.zeros((2, 2))
        e[i, j] = h
        fd = (dev(lam + e) - dev(lam - e)) / (2 * h)
        assert fd == pytest.approx(g[i, j], rel=1e-5, abs=1e-7)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_marginal_loglik_gradient_fd(seed):
    ds = toy_lmm_data(seed, n_subj=8, m=4)
    spec = LmmSpec("y", ("fuptime",), ("fuptime",))
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=2)
    theta = np.r_[rng.normal(0, 0.3), rng.normal(), rng.normal(0, 0.3)]  # log l11, l21, log l22
    ls2 = rng.normal(-1, 0.3)

    def unpack(v):
        L = np.array([[np.exp(v[2]), 0.0], [v[3], np.exp(v[4])]])
        return v[:2], L @ L.T, np.exp(v[5])

    v0 = np.r_[beta, theta, ls2]
    _, g = marginal_loglik(spec, ds, *unpack(v0), with_grad=True)
    h = 1e-6
    for k in range(v0.size):
        e = np.zeros_like(v0)
        e[k] = h
        fd = (marginal_loglik(spec, ds, *unpack(v0 + e)) - marginal_loglik(spec, ds, *unpack(v0 - e))) / (2 * h)
        assert fd == pytest.approx(g[k], rel=1e-5, abs=1e-6)
