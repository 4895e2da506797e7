"""Closed-form single-emitter response.

Lineshape, power saturation and broadening, polarization projection and the
per-scan spectral diffusion of the resonance. All frequencies are absolute
MHz, powers nW, rates kcps, angles degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .rng import Stream
from .units import DomainError, wrap_axial


class Site(str, Enum):
    RED = "red"
    BLUE = "blue"


@dataclass(frozen=True)
class EmitterParams:
    f0: float  # MHz, absolute
    gamma0: float  # MHz
    p_sat: float  # nW
    f_inf: float  # kcps
    phi: float = 0.0  # deg
    sigma_f: float = 0.0  # MHz
    jump_rate: float = 0.0
    jump_scale: float = 150.0  # MHz
    site: Site = Site.BLUE

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise DomainError(f"gamma0 must be > 0, got {self.gamma0}")
        if not self.p_sat > 0:
            raise DomainError(f"p_sat must be > 0, got {self.p_sat}")
        if not self.f_inf >= 0:
            raise DomainError(f"f_inf must be >= 0, got {self.f_inf}")
        if not self.sigma_f >= 0:
            raise DomainError(f"sigma_f must be >= 0, got {self.sigma_f}")
        if not 0.0 <= self.jump_rate <= 1.0:
            raise DomainError(f"jump_rate must be in [0, 1], got {self.jump_rate}")
        if not self.jump_scale >= 0:
            raise DomainError(f"jump_scale must be >= 0, got {self.jump_scale}")
        object.__setattr__(self, "phi", wrap_axial(self.phi))
        object.__setattr__(self, "site", Site(self.site))

    def with_(self, **changes) -> EmitterParams:
        return replace(self, **changes)


@dataclass(frozen=True)
class LorentzianParams:
    center: float  # MHz
    fwhm: float  # MHz
    amplitude: float  # kcps above baseline
    baseline: float = 0.0

    def __post_init__(self):
        if not self.fwhm > 0:
            raise DomainError("fwhm must be > 0")
        if self.amplitude < 0 or self.baseline < 0:
            raise DomainError("amplitude and baseline must be >= 0")


def lorentzian(f, p: LorentzianParams):
    """Peak-normalised Lorentzian plus baseline, B + A (g/2)^2 / (df^2 + (g/2)^2)."""
    hw2 = (0.5 * p.fwhm) ** 2
    df = np.asarray(f, dtype=float) - p.center
    out = p.baseline + p.amplitude * hw2 / (df * df + hw2)
    return float(out) if out.ndim == 0 else out


def saturated_rate(power, e: EmitterParams):
    """Detected on-resonance rate F_inf P / (P + P_sat)."""
    p = np.asarray(power, dtype=float)
    if np.any(p < 0):
        raise DomainError("power must be non-negative")
    out = e.f_inf * p / (p + e.p_sat)
    return float(out) if out.ndim == 0 else out


def broadened_linewidth(power, e: EmitterParams):
    """Power-broadened FWHM gamma0 sqrt((P + P_sat) / P_sat)."""
    p = np.asarray(power, dtype=float)
    if np.any(p < 0):
        raise DomainError("power must be non-negative")
    out = e.gamma0 * np.sqrt((p + e.p_sat) / e.p_sat)
    return float(out) if out.ndim == 0 else out


def polarization_factor(phi, theta_exc):
    """cos^2 of the angle between dipole and excitation polarization.

    Evaluated as (1 + cos 2d) / 2 on the wrapped difference, so the result is
    exactly periodic in 180 deg.
    """
    d = np.radians(wrap_axial(np.asarray(phi, dtype=float) - np.asarray(theta_exc, dtype=float)))
    out = 0.5 * (1.0 + np.cos(2.0 * d))
    return float(out) if np.ndim(out) == 0 else out


def expected_rate(f_laser, power, theta_exc, f_center_now, e: EmitterParams):
    """Mean detected rate in kcps for a laser at ``f_laser``.

    Saturation and broadening both use the power projected onto the dipole.
    Broadcasts over ``f_laser`` and ``f_center_now``.
    """
    p_eff = float(power) * polarization_factor(e.phi, theta_exc)
    peak = saturated_rate(p_eff, e)
    hw2 = (0.5 * broadened_linewidth(p_eff, e)) ** 2
    df = np.asarray(f_laser, dtype=float) - np.asarray(f_center_now, dtype=float)
    out = peak * hw2 / (df * df + hw2)
    return float(out) if np.ndim(out) == 0 else out


def diffuse_centers(e: EmitterParams, n_scans: int, rng: Stream) -> np.ndarray:
    """Resonance centers for scans ``0 .. n_scans - 1``.

    Each scan adds independent Gaussian jitter of width ``sigma_f``. With
    probability ``jump_rate`` per scan a new persistent offset is drawn from
    Laplace(0, jump_scale); it holds until the next jump. The three random
    sequences come from separate sub-streams, so the first ``k`` centers do
    not depend on ``n_scans``.
    """
    if n_scans < 0:
        raise DomainError("n_scans must be >= 0")
    jitter = rng.child("jitter").generator().standard_normal(n_scans) * e.sigma_f
    centers = e.f0 + jitter
    if e.jump_rate > 0 and n_scans:
        jumps = rng.child("jump").generator().random(n_scans) < e.jump_rate
        sizes = rng.child("jump_size").generator().laplace(0.0, 1.0, n_scans) * e.jump_scale
        idx = np.where(jumps, np.arange(n_scans), -1)
        last = np.maximum.accumulate(idx)
        offset = np.where(last >= 0, sizes[np.maximum(last, 0)], 0.0)
        centers = centers + offset
    return centers


def diffuse_center(e: EmitterParams, scan_index: int, rng: Stream) -> float:
    """Resonance center during scan ``scan_index``; see :func:`diffuse_centers`."""
    if scan_index < 0:
        raise DomainError("scan_index must be >= 0")
    return float(diffuse_centers(e, scan_index + 1, rng)[scan_index])
