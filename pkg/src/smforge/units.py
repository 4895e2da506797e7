"""Quantity types shared across the package.

Numerical code works on plain floats and arrays in a fixed unit system:

===========  ==========================================
quantity     unit
===========  ==========================================
frequency    MHz (absolute optical frequency, ~3.8e8)
detuning     MHz (signed)
position     nm (sample plane)
angle        degrees, axial, canonical in (-90, 90]
power        nW at the sample
count rate   kcps
===========  ==========================================

The small frozen dataclasses below guard the boundaries (config, files,
public results) where a THz/MHz or degree/radian slip is most likely.
A 64-bit float holding 3.85e8 MHz has a spacing of ~6e-8 MHz, so detunings
computed from absolute frequencies are exact far below any fit tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MHZ_PER_THZ = 1.0e6
MHZ_PER_GHZ = 1.0e3


class DomainError(ValueError):
    """A value lies outside the domain of an operation."""


def _finite(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value!r}")
    return value


def thz_to_mhz(f_thz):
    return np.asarray(f_thz, dtype=float) * MHZ_PER_THZ if np.ndim(f_thz) else float(f_thz) * MHZ_PER_THZ


def mhz_to_thz(f_mhz):
    return np.asarray(f_mhz, dtype=float) / MHZ_PER_THZ if np.ndim(f_mhz) else float(f_mhz) / MHZ_PER_THZ


def wrap_axial(angle_deg):
    """Map an axial angle (period 180 deg) onto (-90, 90].

    Works elementwise on arrays. Raises DomainError on non-finite input.
    """
    a = np.asarray(angle_deg, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DomainError("angle must be finite")
    out = 90.0 - np.mod(90.0 - a, 180.0)
    if out.ndim == 0:
        return float(out)
    return out


def axial_difference(a, b, signed: bool = False):
    """Difference between two axial angles.

    By default returns the magnitude in [0, 90], which is symmetric in the
    argument order. With ``signed=True`` returns ``wrap_axial(a - b)`` in
    (-90, 90]; swapping the arguments then negates the result modulo 180.
    """
    d = wrap_axial(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    if signed:
        return d
    return np.abs(d) if np.ndim(d) else abs(d)


@dataclass(frozen=True, order=True)
class Detuning:
    mhz: float

    def __post_init__(self):
        object.__setattr__(self, "mhz", _finite(self.mhz, "detuning"))

    @property
    def ghz(self) -> float:
        return self.mhz / MHZ_PER_GHZ

    def __neg__(self) -> Detuning:
        return Detuning(-self.mhz)

    def __add__(self, other):
        if isinstance(other, Detuning):
            return Detuning(self.mhz + other.mhz)
        if isinstance(other, Frequency):
            return Frequency(other.mhz + self.mhz)
        return NotImplemented

    __radd__ = __add__


@dataclass(frozen=True, order=True)
class Frequency:
    """Absolute optical frequency, stored in MHz."""

    mhz: float

    def __post_init__(self):
        v = _finite(self.mhz, "frequency")
        if v <= 0:
            raise DomainError(f"frequency must be positive, got {v}")
        object.__setattr__(self, "mhz", v)

    @classmethod
    def from_thz(cls, thz: float) -> Frequency:
        return cls(float(thz) * MHZ_PER_THZ)

    @property
    def thz(self) -> float:
        return self.mhz / MHZ_PER_THZ

    def __sub__(self, other):
        if isinstance(other, Frequency):
            return Detuning(self.mhz - other.mhz)
        if isinstance(other, Detuning):
            return Frequency(self.mhz - other.mhz)
        return NotImplemented

    def __add__(self, other):
        if isinstance(other, Detuning):
            return Frequency(self.mhz + other.mhz)
        return NotImplemented


@dataclass(frozen=True)
class Position2D:
    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", _finite(self.x, "x"))
        object.__setattr__(self, "y", _finite(self.y, "y"))

    def distance(self, other: Position2D) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class Angle:
    """Axial angle in degrees; the stored value is always canonical."""

    deg: float

    def __post_init__(self):
        object.__setattr__(self, "deg", wrap_axial(self.deg))

    @property
    def rad(self) -> float:
        return math.radians(self.deg)

    def __sub__(self, other: Angle) -> Angle:
        return Angle(self.deg - other.deg)


@dataclass(frozen=True)
class Power:
    nw: float

    def __post_init__(self):
        v = _finite(self.nw, "power")
        if v < 0:
            raise DomainError(f"power must be non-negative, got {v}")
        object.__setattr__(self, "nw", v)


@dataclass(frozen=True)
class CountRate:
    kcps: float

    def __post_init__(self):
        v = _finite(self.kcps, "count rate")
        if v < 0:
            raise DomainError(f"count rate must be non-negative, got {v}")
        object.__setattr__(self, "kcps", v)


class FormatError(ValueError):
    """Malformed or truncated data file."""
