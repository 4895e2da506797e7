"""Model fits used by the analysis chain."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..sample import MixtureParams, mixture_cdf
from ..units import DomainError, wrap_axial
from . import models
from .lm import FitOptions, FitResult, data_digest, levenberg_marquardt

LORENTZ_NAMES = ("center", "fwhm", "amplitude", "baseline")
GAUSS2D_NAMES = ("x0", "y0", "sx", "sy", "amplitude", "baseline")
COS2_NAMES = ("phi", "amplitude", "offset")
SATURATION_NAMES = ("f_inf", "p_sat", "gamma0")
MIXTURE_NAMES = ("a", "sigma0", "phi_prime", "sigma1")

MIXTURE_INIT = (0.6, 8.0, 30.0, 12.0)

MLE_REWEIGHTS = 6
MLE_FLOOR = 1e-2


def poisson_weights(y, counts_per_unit: float = 1.0):
    """Residual multipliers for count data: c / sqrt(max(c y, 1)), i.e. variance weights 1/max(counts, 1)."""
    counts = np.asarray(y, dtype=float) * counts_per_unit
    return counts_per_unit / np.sqrt(np.maximum(counts, 1.0))


def _weights(y, weighting: str, counts_per_unit: float):
    if weighting in ("poisson", "mle"):
        return poisson_weights(y, counts_per_unit)
    if weighting == "none":
        return np.ones_like(np.asarray(y, dtype=float))
    raise ValueError(f"unknown weighting {weighting!r}")


def _with_bounds(options: Optional[FitOptions], bounds, **overrides) -> FitOptions:
    base = options or FitOptions()
    kw = {k: getattr(base, k) for k in ("max_iterations", "xtol", "gtol", "ftol", "damping", "atol_residual")}
    kw.update(overrides)
    return FitOptions(bounds=bounds if base.bounds is None else base.bounds, **kw)


# Lorentzian line

def lorentzian_init(f, y):
    """Peak location, half-maximum crossings, low-percentile baseline."""
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    ys = np.convolve(y, np.ones(3) / 3.0, mode="same") if y.size >= 5 else y
    ys[0], ys[-1] = y[0], y[-1]
    base = float(np.percentile(y, 10))
    i = int(np.argmax(ys))
    amp = float(ys[i] - base)
    step = float(np.median(np.diff(f))) if f.size > 1 else 1.0
    if amp <= 0:
        return np.array([f[i], 4.0 * step, 0.0, max(base, 0.0)])
    half = base + 0.5 * amp
    lo = i
    while lo > 0 and ys[lo] > half:
        lo -= 1
    hi = i
    while hi < ys.size - 1 and ys[hi] > half:
        hi += 1

    def cross(j0, j1):
        y0, y1 = ys[j0], ys[j1]
        if y1 == y0:
            return f[j0]
        return f[j0] + (half - y0) * (f[j1] - f[j0]) / (y1 - y0)

    left = cross(lo, lo + 1) if ys[lo] <= half else f[lo]
    right = cross(hi - 1, hi) if ys[hi] <= half else f[hi]
    fwhm = max(right - left, 2.0 * step)
    return np.array([f[i], fwhm, amp, max(base, 0.0)])


def fit_lorentzian(
    trace=None,
    rate=None,
    init: Optional[Sequence[float]] = None,
    weighting: str = "poisson",
    counts_per_unit: float = 1.0,
    options: Optional[FitOptions] = None,
    *,
    freq=None,
) -> FitResult:
    """Fit ``baseline + amplitude * (fwhm/2)^2 / ((f - center)^2 + (fwhm/2)^2)``.

    Accepts a ScanTrace-like object (``.freq``, ``.rate``) or ``freq=`` and
    ``rate=`` arrays. Frequencies are absolute MHz; the fit runs on detunings
    from the middle of the trace. ``counts_per_unit`` converts rates to
    counts for the Poisson weights.
    """
    if trace is not None and rate is None:
        f, y = np.asarray(trace.freq, dtype=float), np.asarray(trace.rate, dtype=float)
        if counts_per_unit == 1.0 and getattr(trace, "exposure_s", None):
            counts_per_unit = 1e3 * trace.exposure_s
    else:
        f = np.asarray(freq if freq is not None else trace, dtype=float)
        y = np.asarray(rate, dtype=float)
    if f.size < 8:
        raise DomainError("need at least 8 points for a Lorentzian fit")
    order = np.argsort(f, kind="stable")
    f, y = f[order], y[order]
    ref = 0.5 * (f[0] + f[-1])
    x = f - ref
    span = float(x[-1] - x[0])
    if span <= 0:
        raise DomainError("trace must span a frequency range")
    p0 = lorentzian_init(x, y) if init is None else np.asarray(init, dtype=float) - np.array([ref, 0, 0, 0])
    step = float(np.min(np.diff(x)[np.diff(x) > 0])) if np.any(np.diff(x) > 0) else span
    p0[1] = min(max(p0[1], 1.01 * step), 9.99 * span)
    scale = max(float(np.max(np.abs(y))), 1e-300)
    p0[2] = max(p0[2], 1e-9 * scale)
    w = _weights(y, weighting, counts_per_unit)
    # a line narrower than the sampling step is not resolvable
    bounds = [(float(x[0]), float(x[-1])), (step, 10.0 * span), (0.0, None), (0.0, None)]
    floor = 1e-12 * float(np.linalg.norm(y * w))
    opts = _with_bounds(options, bounds, atol_residual=max(floor, (options or FitOptions()).atol_residual))

    res = levenberg_marquardt(
        lambda p: (models.lorentzian_model(p, x) - y) * w,
        p0,
        jac=lambda p: models.lorentzian_jacobian(p, x) * w[:, None],
        options=opts,
        names=LORENTZ_NAMES,
        model="lorentzian",
    )
    res.params = res.params + np.array([ref, 0.0, 0.0, 0.0])
    res.data_digest = data_digest(f, y)
    flags = list(res.flags)
    if not (res.sigma[2] < math.inf) or res.params[2] < 2.0 * res.sigma[2]:
        flags.append("weak_amplitude")
    res.flags = tuple(flags)
    return res


# 2D Gaussian spot

def gaussian2d_init(roi, xe, ye):
    roi = np.asarray(roi, dtype=float)
    xc = 0.5 * (xe[:-1] + xe[1:])
    yc = 0.5 * (ye[:-1] + ye[1:])
    edge = np.concatenate([roi[0], roi[-1], roi[1:-1, 0], roi[1:-1, -1]])
    base = float(np.median(edge))
    s = np.clip(roi - base, 0.0, None)
    tot = s.sum()
    pix = float(xe[1] - xe[0])
    if tot <= 0:
        return np.array([xc.mean(), yc.mean(), pix, pix, 0.0, base])
    X, Y = np.meshgrid(xc, yc)
    mx = float((s * X).sum() / tot)
    my = float((s * Y).sum() / tot)
    vx = float((s * (X - mx) ** 2).sum() / tot)
    vy = float((s * (Y - my) ** 2).sum() / tot)
    sx = math.sqrt(max(vx - pix * pix / 12.0, (0.5 * pix) ** 2))
    sy = math.sqrt(max(vy - pix * pix / 12.0, (0.5 * pix) ** 2))
    return np.array([mx, my, sx, sy, float(tot), base])


def fit_gaussian2d(
    roi,
    pixel_size: float = 1.0,
    origin: tuple[float, float] = (0.0, 0.0),
    weighting: str = "poisson",
    init: Optional[Sequence[float]] = None,
    options: Optional[FitOptions] = None,
) -> FitResult:
    """Fit a pixel-integrated Gaussian spot to ``roi[row, col]``.

    Pixel ``(r, c)`` spans ``origin + (c, r) * pixel_size`` to one pixel
    further, so the fitted center is in sample coordinates (nm when the
    pixel size is in nm). ``amplitude`` is the integrated photon count and
    ``baseline`` the per-pixel background.
    """
    roi = np.asarray(roi, dtype=float)
    if roi.ndim != 2 or min(roi.shape) < 7:
        raise DomainError("roi must be at least 7x7 pixels")
    ny, nx = roi.shape
    xe = origin[0] + pixel_size * np.arange(nx + 1)
    ye = origin[1] + pixel_size * np.arange(ny + 1)
    y = roi.ravel()
    w = _weights(y, weighting, 1.0)
    if float(roi.max() - roi.min()) <= 0:
        p = np.array([0.5 * (xe[0] + xe[-1]), 0.5 * (ye[0] + ye[-1]), pixel_size, pixel_size, 0.0, float(roi.mean())])
        return FitResult(p, np.full(6, np.inf), 0.0, 0, False, "gaussian2d", GAUSS2D_NAMES, ("flat",),
                         data_digest=data_digest(roi))
    p0 = gaussian2d_init(roi, xe, ye) if init is None else np.asarray(init, dtype=float)
    p0[4] = max(p0[4], 1e-9 * float(np.abs(y).max()))
    bounds = [
        (float(xe[0]), float(xe[-1])),
        (float(ye[0]), float(ye[-1])),
        (0.05 * pixel_size, 20.0 * pixel_size),
        (0.05 * pixel_size, 20.0 * pixel_size),
        (0.0, None),
        (None, None),
    ]
    floor = 1e-12 * float(np.linalg.norm(y * w))
    opts = _with_bounds(options, bounds, atol_residual=max(floor, (options or FitOptions()).atol_residual))
    def run(w, start):
        return levenberg_marquardt(
            lambda p: (models.gaussian2d_model(p, xe, ye).ravel() - y) * w,
            start,
            jac=lambda p: models.gaussian2d_jacobian(p, xe, ye) * w[:, None],
            options=opts,
            names=GAUSS2D_NAMES,
            model="gaussian2d",
        )

    res = run(w, p0)
    if weighting == "mle":
        # weights from the current model; the fixed point solves the Poisson score equations
        for _ in range(MLE_REWEIGHTS):
            mu = models.gaussian2d_model(res.params, xe, ye).ravel()
            prev = res.params
            res = run(1.0 / np.sqrt(np.maximum(mu, MLE_FLOOR)), prev)
            if np.all(np.abs(res.params[:2] - prev[:2]) < 1e-4 * pixel_size):
                break
    res.data_digest = data_digest(roi)
    if not (res.sigma[4] < math.inf) or res.params[4] < 3.0 * res.sigma[4]:
        res.flags = res.flags + ("weak_amplitude",)
        res.converged = False
    return res


# cos^2 polarization response

def fit_cos2(angles, rates, weighting: str = "none", counts_per_unit: float = 1.0,
             options: Optional[FitOptions] = None) -> FitResult:
    """Fit ``offset + amplitude * cos^2(theta - phi)``; phi is returned wrapped to (-90, 90].

    The model is linear in (offset + A/2, A/2 cos 2phi, A/2 sin 2phi); the
    linear solution (the period-180 Fourier component for evenly spaced
    angles) seeds the iteration. Unweighted by default, which keeps phi
    exactly invariant under rescaling of the rates.
    """
    th = np.asarray(angles, dtype=float)
    y = np.asarray(rates, dtype=float)
    if len({round(wrap_axial(a), 9) for a in th}) < 4:
        raise DomainError("need at least 4 distinct polarization angles")
    t2 = 2.0 * np.radians(th)
    B = np.column_stack([np.ones_like(t2), np.cos(t2), np.sin(t2)])
    c, *_ = np.linalg.lstsq(B, y, rcond=None)
    half_amp = math.hypot(c[1], c[2])
    phi0 = 0.5 * math.degrees(math.atan2(c[2], c[1]))
    scale = max(float(np.max(np.abs(y))), 1e-300)
    p0 = np.array([phi0, max(2.0 * half_amp, 1e-12 * scale), c[0] - half_amp])
    w = _weights(y, weighting, counts_per_unit)
    bounds = [(None, None), (0.0, None), (None, None)]
    floor = 1e-13 * float(np.linalg.norm(y * w))
    opts = _with_bounds(options, bounds, atol_residual=max(floor, (options or FitOptions()).atol_residual))
    flags = []
    if half_amp <= 1e-9 * scale:
        flags.append("phi_undetermined")
    res = levenberg_marquardt(
        lambda p: (models.cos2_model(p, th) - y) * w,
        p0,
        jac=lambda p: models.cos2_jacobian(p, th) * w[:, None],
        options=opts,
        names=COS2_NAMES,
        model="cos2",
    )
    res.params[0] = wrap_axial(res.params[0])
    res.flags = res.flags + tuple(flags)
    res.data_digest = data_digest(th, y)
    return res


# Saturation law

def saturation_init(powers, peaks, widths):
    P = np.asarray(powers, dtype=float)
    F = np.asarray(peaks, dtype=float)
    G = np.asarray(widths, dtype=float)
    p_sat = float(np.median(P[P > 0])) if np.any(P > 0) else 1.0
    g0 = float(np.min(G)) if G.size else 1.0
    if P.size >= 2 and np.ptp(P) > 0:
        slope, icpt = np.polyfit(P, G**2, 1)
        if icpt > 0 and slope > 0:
            g0, p_sat = math.sqrt(icpt), icpt / slope
    f_inf = 2.0 * float(np.max(F)) if F.size else 1.0
    good = (P > 0) & (F > 0)
    if good.sum() >= 2:
        # 1/F = 1/F_inf + (P_sat/F_inf) (1/P)
        slope, icpt = np.polyfit(1.0 / P[good], 1.0 / F[good], 1)
        if icpt > 0 and slope > 0:
            f_inf = 1.0 / icpt
            if not (g0 > 0 and p_sat > 0):
                p_sat = slope * f_inf
    return np.array([max(f_inf, 1e-12), max(p_sat, 1e-12), max(g0, 1e-12)])


def fit_saturation(powers, peak_rates, linewidths, rate_sigma=None, width_sigma=None,
                   options: Optional[FitOptions] = None) -> FitResult:
    """Joint fit of the saturation and power-broadening laws with a shared P_sat.

    Without explicit uncertainties every point gets the same relative error,
    floored at 1% of the largest value of its kind.
    """
    P = np.asarray(powers, dtype=float)
    F = np.asarray(peak_rates, dtype=float)
    G = np.asarray(linewidths, dtype=float)
    if not (P.shape == F.shape == G.shape) or P.size == 0:
        raise DomainError("powers, peak_rates and linewidths must be equal-length and non-empty")
    if np.any(P < 0):
        raise DomainError("powers must be >= 0")
    sf = np.asarray(rate_sigma, dtype=float) if rate_sigma is not None else np.maximum(np.abs(F), 0.01 * np.abs(F).max())
    sg = np.asarray(width_sigma, dtype=float) if width_sigma is not None else np.maximum(np.abs(G), 0.01 * np.abs(G).max())
    sf = np.where(sf > 0, sf, 1.0)
    sg = np.where(sg > 0, sg, 1.0)
    w = 1.0 / np.concatenate([sf, sg])
    y = np.concatenate([F, G])
    p0 = saturation_init(P, F, G)
    bounds = [(0.0, None), (0.0, None), (0.0, None)]
    opts = _with_bounds(options, bounds, atol_residual=max(1e-13 * float(np.linalg.norm(y * w)), (options or FitOptions()).atol_residual))
    res = levenberg_marquardt(
        lambda p: (models.saturation_model(p, P) - y) * w,
        p0,
        jac=lambda p: models.saturation_jacobian(p, P) * w[:, None],
        options=opts,
        names=SATURATION_NAMES,
        model="saturation",
    )
    flags = list(res.flags)
    if np.unique(P).size < 3:
        flags.append("underdetermined")
        res.converged = False
    elif not np.all(np.isfinite(res.sigma)) or np.any(res.sigma > res.params):
        flags.append("poorly_identified")
    res.flags = tuple(flags)
    res.data_digest = data_digest(P, F, G)
    return res


# Dipole-orientation mixture

def dphi_histogram(dphi, bin_width: float = 2.5):
    """Histogram of |axial differences| on [0, 90]."""
    edges = np.linspace(0.0, 90.0, int(round(90.0 / bin_width)) + 1)
    counts, _ = np.histogram(np.abs(wrap_axial(np.asarray(dphi, dtype=float))), bins=edges)
    return counts, edges


def _mixture_bounds():
    return [(0.0, 1.0), (0.0, None), (0.0, 90.0), (0.0, None)]


def _mixture_flags(res: FitResult) -> tuple[str, ...]:
    flags = list(res.flags)
    a = res.params[0]
    if a > 0.98 or not np.all(np.isfinite(res.sigma[2:])) or res.sigma[2] > 30.0:
        flags.append("sideband_unidentified")
    return tuple(flags)


def fit_angle_mixture(counts, edges=None, init: Sequence[float] = MIXTURE_INIT,
                      options: Optional[FitOptions] = None) -> FitResult:
    """Fit the pair-difference density of the dipole mixture to a |dphi| histogram.

    Expected bin counts are the total count times the exact bin mass of the
    folded pair density. Poisson weights.
    """
    counts = np.asarray(counts, dtype=float)
    if edges is None:
        edges = np.linspace(0.0, 90.0, counts.size + 1)
    edges = np.asarray(edges, dtype=float)
    if counts.size < 18 or edges.size != counts.size + 1:
        raise DomainError("need at least 18 bins with matching edges")
    total = counts.sum()
    if total < 1000:
        raise DomainError("need a total count of at least 1000")
    w = poisson_weights(counts)

    def resid(p):
        m = MixtureParams(*np.clip(p, [0, 1e-6, 0, 1e-6], [1, np.inf, 90, np.inf]))
        return (total * models.delta_phi_bin_mass(edges, m) - counts) * w

    opts = _with_bounds(options, _mixture_bounds())
    res = levenberg_marquardt(resid, np.asarray(init, dtype=float), options=opts, names=MIXTURE_NAMES,
                              model="delta_phi_mixture")
    res.flags = _mixture_flags(res)
    res.data_digest = data_digest(counts, edges)
    return res


def fit_phi_samples(phi, bin_width: float = 2.5, init: Sequence[float] = MIXTURE_INIT,
                    options: Optional[FitOptions] = None) -> FitResult:
    """Fit the mixture directly to angles measured against a reference axis."""
    edges = np.linspace(-90.0, 90.0, int(round(180.0 / bin_width)) + 1)
    counts, _ = np.histogram(wrap_axial(np.asarray(phi, dtype=float)), bins=edges)
    counts = counts.astype(float)
    total = counts.sum()
    if total < 100:
        raise DomainError("need at least 100 angles")
    w = poisson_weights(counts)

    def resid(p):
        m = MixtureParams(*np.clip(p, [0, 1e-6, 0, 1e-6], [1, np.inf, 90, np.inf]))
        return (total * np.diff(mixture_cdf(edges, m)) - counts) * w

    opts = _with_bounds(options, _mixture_bounds())
    res = levenberg_marquardt(resid, np.asarray(init, dtype=float), options=opts, names=MIXTURE_NAMES,
                              model="phi_mixture")
    res.flags = _mixture_flags(res)
    res.data_digest = data_digest(counts, edges)
    return res
