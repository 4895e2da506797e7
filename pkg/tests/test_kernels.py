import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import erf

from smforge import _kernels

BACKENDS = sorted(_kernels.backends())


def _erf_oracle(shape, x, y, f, sigma, x0, y0, pixel):
    """Direct separable pixel integral, no truncation."""
    H, W = shape
    s = math.sqrt(2.0) * sigma
    ex = 0.5 * np.diff(erf((x0 + np.arange(W + 1) * pixel - x) / s))
    ey = 0.5 * np.diff(erf((y0 + np.arange(H + 1) * pixel - y) / s))
    return f * np.outer(ey, ex)


@pytest.mark.parametrize("name", BACKENDS)
@given(x=st.floats(1500, 3500), y=st.floats(1500, 3500), f=st.floats(1, 1e5), sigma=st.floats(60, 300))
def test_flux_conserved(name, x, y, f, sigma):
    impl = _kernels.backends()[name]
    img = np.zeros((50, 50))
    impl.accumulate_psf(img, np.array([x]), np.array([y]), np.array([f]), sigma, 0.0, 0.0, 100.0, 7.0)
    assert img.sum() == pytest.approx(f, rel=1e-6)
    np.testing.assert_allclose(img, _erf_oracle(img.shape, x, y, f, sigma, 0.0, 0.0, 100.0), atol=1e-9 * f)


def test_backends_agree():
    gen = np.random.default_rng(3)
    n = 300
    xs, ys = gen.uniform(-500, 6900, n), gen.uniform(-500, 6900, n)
    flux = gen.exponential(500, n)
    imgs = []
    for name in BACKENDS:
        img = np.zeros((64, 64))
        _kernels.backends()[name].accumulate_psf(img, xs, ys, flux, 130.0, 0.0, 0.0, 100.0, 7.0)
        imgs.append(img)
    for img in imgs[1:]:
        np.testing.assert_allclose(img, imgs[0], rtol=1e-12, atol=1e-9)


def _brute_pairs(x, y, r):
    out = []
    for i in range(len(x)):
        for j in range(i + 1, len(x)):
            d = math.hypot(x[i] - x[j], y[i] - y[j])
            if d <= r:
                out.append((i, j))
    return out


@pytest.mark.parametrize("name", BACKENDS)
@given(pts=st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), max_size=60), r=st.floats(0.5, 40))
def test_pairs_match_brute_force(name, pts, r):
    x = np.array([p[0] for p in pts], float)
    y = np.array([p[1] for p in pts], float)
    i, j, d = _kernels.backends()[name].pairs_within(x, y, r)
    got = list(zip(i.tolist(), j.tolist()))
    want = _brute_pairs(x, y, r * (1 + 1e-9))
    # boundary ties are within float rounding either way
    strict = [p for p in want if math.hypot(x[p[0]] - x[p[1]], y[p[0]] - y[p[1]]) < r * (1 - 1e-9)]
    assert set(strict) <= set(got)
    assert np.all(d <= r * (1 + 1e-9))
    assert got == sorted(got)
    np.testing.assert_allclose(d, np.hypot(x[i] - x[j], y[i] - y[j]))


def test_dispatch_backend_name():
    assert _kernels.BACKEND in BACKENDS
