import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from smforge.fitting import models
from smforge.fitting.fits import (
    dphi_histogram,
    fit_angle_mixture,
    fit_cos2,
    fit_gaussian2d,
    fit_lorentzian,
    fit_phi_samples,
    fit_saturation,
)
from smforge.sample import MixtureParams, mixture_cdf, sample_dipoles
from smforge.units import DomainError, axial_difference


@given(c=st.floats(-100, 100), w=st.floats(15, 150), a=st.floats(1, 500), b=st.floats(0, 20))
def test_lorentzian_noiseless(c, w, a, b):
    f = 381.9e6 + np.arange(-400, 400, 7.0)
    y = models.lorentzian_model([381.9e6 + c, w, a, b], f)
    res = fit_lorentzian(freq=f, rate=y, weighting="none")
    np.testing.assert_allclose(res.params, [381.9e6 + c, w, a, b], rtol=1e-6, atol=1e-6 * a)


@given(x=st.floats(300, 700), y=st.floats(300, 700), s=st.floats(90, 200), n=st.floats(100, 1e5))
@settings(max_examples=30)
def test_gaussian2d_noiseless(x, y, s, n):
    xe = np.arange(12) * 100.0
    img = models.gaussian2d_model([x, y, s, s, n, 2.0], xe, xe)
    res = fit_gaussian2d(img, 100.0, (0.0, 0.0), weighting="none")
    np.testing.assert_allclose(res.params, [x, y, s, s, n, 2.0], rtol=1e-6, atol=1e-6)


def test_gaussian2d_mle_unbiased():
    gen = np.random.default_rng(1)
    xe = np.arange(12) * 100.0
    mu = models.gaussian2d_model([550, 560, 130, 130, 500, 2.0], xe, xe)
    xs = [fit_gaussian2d(gen.poisson(mu), 100.0, weighting="mle")["x0"] for _ in range(300)]
    assert abs(np.mean(xs) - 550) < 3 * np.std(xs) / np.sqrt(len(xs)) + 0.5


@given(phi=st.floats(-89.9, 90), a=st.floats(1, 100), o=st.floats(0, 10))
def test_cos2_noiseless(phi, a, o):
    th = np.arange(0, 180, 18.0)
    res = fit_cos2(th, models.cos2_model([phi, a, o], th))
    assert axial_difference(res["phi"], phi) < 1e-6
    assert res["amplitude"] == pytest.approx(a, rel=1e-6)
    with pytest.raises(DomainError):
        fit_cos2([0, 90, 180], [1, 2, 1])


def test_saturation_noiseless():
    P = np.array([0.17, 1.6, 6.6, 95.0])
    truth = np.array([257.0, 3.6, 41.0])
    y = models.saturation_model(truth, P)
    res = fit_saturation(P, y[:4], y[4:])
    np.testing.assert_allclose(res.params, truth, rtol=1e-6)
    assert "underdetermined" in fit_saturation(P[:2], y[:2], y[4:6]).flags


def test_delta_phi_density_normalized_and_matches_monte_carlo():
    m = MixtureParams()
    total, _ = integrate.quad(lambda x: models.delta_phi_density(x, m), 0, 90, limit=200)
    assert total == pytest.approx(1.0, abs=1e-8)
    edges = np.linspace(0, 90, 37)
    assert models.delta_phi_bin_mass(edges, m).sum() == pytest.approx(1.0, abs=1e-12)
    gen = np.random.default_rng(5)
    a = sample_dipoles(m, 200000, gen)
    b = sample_dipoles(m, 200000, gen)
    obs, _ = np.histogram(axial_difference(a, b), edges)
    exp = models.delta_phi_bin_mass(edges, m) * a.size
    chi2 = ((obs - exp) ** 2 / exp).sum()
    assert stats.chi2.sf(chi2, len(obs) - 1) > 1e-3


@pytest.mark.parametrize("truth", [(0.63, 6.0, 29.0, 12.5), (0.5, 4.0, 40.0, 8.0)])
def test_mixture_from_exact_masses(truth):
    m = MixtureParams(*truth)
    counts, edges = dphi_histogram(np.empty(0))
    exact = 1e6 * models.delta_phi_bin_mass(edges, m)
    res = fit_angle_mixture(exact, edges)
    np.testing.assert_allclose(res.params, truth, rtol=1e-4)


def test_phi_samples_exact():
    m = MixtureParams()
    edges = np.linspace(-90, 90, 73)
    mass = np.diff(mixture_cdf(edges, m))
    # place mass[k] * N points at each bin center, the histogram is then exact to rounding
    n = np.rint(mass * 2e5).astype(int)
    phi = np.repeat(0.5 * (edges[:-1] + edges[1:]), n)
    res = fit_phi_samples(phi)
    np.testing.assert_allclose(res.params, m.as_tuple(), rtol=0.02)


def test_mixture_needs_data():
    with pytest.raises(DomainError):
        fit_angle_mixture(np.ones(36))
    with pytest.raises(DomainError):
        fit_angle_mixture(np.ones(10) * 500)
