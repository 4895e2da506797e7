"""Model functions and their analytic Jacobians.

Each ``*_model`` returns model values; each ``*_jacobian`` returns the
derivative matrix with one column per parameter, in the same order.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..sample import MixtureParams, wrapped_normal_cdf, wrapped_normal_pdf
from ..units import wrap_axial

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)
_DEG = math.pi / 180.0


# Lorentzian: (center, fwhm, amplitude, baseline)

def lorentzian_model(p, f):
    c, w, a, b = p
    hw2 = 0.25 * w * w
    d = f - c
    return b + a * hw2 / (d * d + hw2)


def lorentzian_jacobian(p, f):
    c, w, a, b = p
    hw2 = 0.25 * w * w
    d = f - c
    den = d * d + hw2
    shape = hw2 / den
    dc = a * hw2 * 2.0 * d / den**2
    # d(shape)/dw = (w/2) d^2 / den^2
    dw = a * 0.5 * w * d * d / den**2
    return np.column_stack([dc, dw, shape, np.ones_like(f)])


# Pixel-integrated 2D Gaussian: (x0, y0, sx, sy, amplitude, baseline)
# ``xe`` and ``ye`` are pixel edges; the model is an (ny, nx) image.

def _axis(edges, mu, s):
    z = (edges - mu) / (_SQRT2 * s)
    e = 0.5 * np.diff(erf(z))
    g = np.exp(-((edges - mu) ** 2) / (2.0 * s * s)) / (_SQRT2PI * s)
    dmu = g[:-1] - g[1:]
    t = (edges - mu) * g
    ds = (t[:-1] - t[1:]) / s
    return e, dmu, ds


def gaussian2d_model(p, xe, ye):
    x0, y0, sx, sy, n, b = p
    ex, _, _ = _axis(xe, x0, sx)
    ey, _, _ = _axis(ye, y0, sy)
    return b + n * np.outer(ey, ex)


def gaussian2d_jacobian(p, xe, ye):
    x0, y0, sx, sy, n, b = p
    ex, dex, dsx = _axis(xe, x0, sx)
    ey, dey, dsy = _axis(ye, y0, sy)
    cols = [
        n * np.outer(ey, dex),
        n * np.outer(dey, ex),
        n * np.outer(ey, dsx),
        n * np.outer(dsy, ex),
        np.outer(ey, ex),
        np.ones((ey.size, ex.size)),
    ]
    return np.column_stack([c.ravel() for c in cols])


# cos^2 polarization response: (phi_deg, amplitude, offset)

def cos2_model(p, theta_deg):
    phi, a, o = p
    return o + a * np.cos((theta_deg - phi) * _DEG) ** 2


def cos2_jacobian(p, theta_deg):
    phi, a, o = p
    t = (theta_deg - phi) * _DEG
    return np.column_stack([a * np.sin(2.0 * t) * _DEG, np.cos(t) ** 2, np.ones_like(t)])


# Saturation law: (f_inf, p_sat, gamma0); rows are [rates..., widths...]

def saturation_model(p, powers):
    f_inf, p_sat, g0 = p
    return np.concatenate([f_inf * powers / (powers + p_sat), g0 * np.sqrt((powers + p_sat) / p_sat)])


def saturation_jacobian(p, powers):
    f_inf, p_sat, g0 = p
    P = powers
    s = np.sqrt((P + p_sat) / p_sat)
    rate = np.column_stack([P / (P + p_sat), -f_inf * P / (P + p_sat) ** 2, np.zeros_like(P)])
    width = np.column_stack([np.zeros_like(P), g0 * 0.5 / s * (-P / p_sat**2), s])
    return np.vstack([rate, width])


# Pairwise dipole-angle differences

def _pair_terms(m: MixtureParams):
    """Signed-difference density as weighted wrapped Gaussians (w, mean, sd)."""
    w, mu, sd = m.components()
    ww = np.outer(w, w).ravel()
    dm = np.subtract.outer(mu, mu).ravel()
    ds = np.sqrt(np.add.outer(sd**2, sd**2)).ravel()
    return ww, dm, ds


def delta_phi_density(dphi, m: MixtureParams):
    """Density per degree of |axial difference| between two iid mixture draws.

    The signed difference of two independent wrapped Gaussians is a wrapped
    Gaussian with the difference of means and summed variances, so the
    circular self-correlation of the mixture is a nine-term wrapped mixture.
    It is folded onto [0, 90] (factor 2, the mixture being even).
    """
    x = np.abs(wrap_axial(dphi))
    ww, dm, ds = _pair_terms(m)
    out = 2.0 * sum(wi * wrapped_normal_pdf(x, mi, si) for wi, mi, si in zip(ww, dm, ds))
    return float(out) if np.ndim(out) == 0 else out


def delta_phi_cdf(x, m: MixtureParams):
    """Folded mass on [0, x] for x in [0, 90]."""
    x = np.asarray(x, dtype=float)
    ww, dm, ds = _pair_terms(m)
    out = 2.0 * sum(
        wi * (wrapped_normal_cdf(x, mi, si) - wrapped_normal_cdf(0.0, mi, si)) for wi, mi, si in zip(ww, dm, ds)
    )
    return out


def delta_phi_bin_mass(edges, m: MixtureParams):
    return np.diff(delta_phi_cdf(edges, m))
