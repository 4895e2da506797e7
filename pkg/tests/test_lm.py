import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import least_squares

from smforge.fitting import models
from smforge.fitting.lm import (
    FitOptions,
    FitResult,
    covariance_from_jacobian,
    finite_difference_jacobian,
    levenberg_marquardt,
)


def _central(fun, p, h=1e-5):
    """Independent central differences with a step floored at ``h``."""
    cols = []
    for i in range(p.size):
        d = np.zeros_like(p)
        d[i] = h * max(abs(p[i]), 1.0)
        cols.append((fun(p + d) - fun(p - d)) / (2 * d[i]))
    return np.column_stack(cols)


def _rel_close(J, Jfd, tol=1e-5):
    scale = np.maximum(np.abs(J).max(axis=0), 1e-300)
    assert np.all(np.abs(J - Jfd) / scale <= tol)


@given(c=st.floats(-50, 50), w=st.floats(5, 200), a=st.floats(0.1, 500), b=st.floats(0, 50))
def test_lorentzian_jacobian(c, w, a, b):
    f = np.linspace(-300, 300, 61)
    p = np.array([c, w, a, b])
    J = models.lorentzian_jacobian(p, f)
    _rel_close(J, _central(lambda q: models.lorentzian_model(q, f), p))


@given(x0=st.floats(200, 800), y0=st.floats(200, 800), s=st.floats(60, 250), n=st.floats(10, 1e5))
def test_gaussian2d_jacobian(x0, y0, s, n):
    xe = np.arange(11) * 100.0
    ye = np.arange(11) * 100.0
    p = np.array([x0, y0, s, 1.1 * s, n, 3.0])
    J = models.gaussian2d_jacobian(p, xe, ye)
    _rel_close(J, _central(lambda q: models.gaussian2d_model(q, xe, ye).ravel(), p))


@given(phi=st.floats(-90, 90), a=st.floats(0.1, 100), o=st.floats(0, 10))
def test_cos2_jacobian(phi, a, o):
    th = np.arange(0, 180, 18.0)
    p = np.array([phi, a, o])
    _rel_close(models.cos2_jacobian(p, th), _central(lambda q: models.cos2_model(q, th), p))


@given(f=st.floats(10, 1000), ps=st.floats(0.5, 50), g=st.floats(5, 200))
def test_saturation_jacobian(f, ps, g):
    P = np.array([0.17, 1.6, 6.6, 95.0])
    p = np.array([f, ps, g])
    _rel_close(models.saturation_jacobian(p, P),
               _central(lambda q: models.saturation_model(q, P), p))


def _exp_problem(seed):
    gen = np.random.default_rng(seed)
    t = np.linspace(0, 4, 40)
    truth = np.array([2.0, 1.3, 0.2])
    y = truth[0] * np.exp(-truth[1] * t) + truth[2] + 0.01 * gen.standard_normal(t.size)

    def resid(p):
        return p[0] * np.exp(-p[1] * t) + p[2] - y

    def jac(p):
        e = np.exp(-p[1] * t)
        return np.column_stack([e, -p[0] * t * e, np.ones_like(t)])

    return resid, jac


@given(st.integers(0, 10**6), st.floats(0.2, 5), st.floats(0.1, 4))
def test_cost_monotone(seed, a0, k0):
    resid, jac = _exp_problem(seed)
    res = levenberg_marquardt(resid, [a0, k0, 0.0], jac)
    h = np.array(res.cost_history)
    assert np.all(np.diff(h) <= 0)
    assert res.residual_norm == pytest.approx(np.sqrt(2 * h[-1]))


@pytest.mark.parametrize("seed", range(5))
def test_matches_scipy(seed):
    resid, jac = _exp_problem(seed)
    ours = levenberg_marquardt(resid, [1.0, 1.0, 0.0], jac)
    ref = least_squares(resid, [1.0, 1.0, 0.0], jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    assert ours.converged
    np.testing.assert_allclose(ours.params, ref.x, rtol=1e-5, atol=1e-7)
    # finite-difference Jacobian route lands on the same point
    fd = levenberg_marquardt(resid, [1.0, 1.0, 0.0])
    np.testing.assert_allclose(fd.params, ref.x, rtol=1e-5, atol=1e-7)


def test_bounds_respected():
    resid, jac = _exp_problem(1)
    res = levenberg_marquardt(resid, [1.0, 0.5, 0.0], jac, FitOptions(bounds=[(0, 1.5), (0, None), (None, 0.1)]))
    p = res.params
    assert 0 <= p[0] <= 1.5 and p[1] >= 0 and p[2] <= 0.1


def test_covariance_degenerate_direction():
    J = np.column_stack([np.ones(5), np.ones(5), np.arange(5.0)])
    cov = covariance_from_jacobian(J, 1.0)
    assert np.isinf(cov[0, 0]) and np.isinf(cov[1, 1]) and np.isfinite(cov[2, 2])
    assert np.all(np.isinf(covariance_from_jacobian(J[:3], 1.0)))


def test_fit_result_roundtrip():
    resid, jac = _exp_problem(2)
    res = levenberg_marquardt(resid, [1.0, 1.0, 0.0], jac, names=("a", "k", "c"))
    back = FitResult.from_dict(res.to_dict())
    assert back.to_json() == res.to_json()
    assert back["k"] == res["k"] and back.err("k") == res.err("k")


def test_bad_inputs():
    with pytest.raises(ValueError):
        levenberg_marquardt(lambda p: p, [np.nan])
    with pytest.raises(ValueError):
        FitOptions(xtol=0)
    with pytest.raises(ValueError):
        levenberg_marquardt(lambda p: p, [1.0], options=FitOptions(bounds=[(1, 0)]))


def test_library_finite_differences():
    f = np.linspace(-300, 300, 61)
    p = np.array([12.0, 40.0, 100.0, 2.0])
    _rel_close(models.lorentzian_jacobian(p, f),
               finite_difference_jacobian(lambda q: models.lorentzian_model(q, f), p))
