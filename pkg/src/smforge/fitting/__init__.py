"""Least-squares engine and the model fits built on it."""

from .fits import (
    dphi_histogram,
    fit_angle_mixture,
    fit_cos2,
    fit_gaussian2d,
    fit_lorentzian,
    fit_phi_samples,
    fit_saturation,
    poisson_weights,
)
from .lm import FitOptions, FitResult, finite_difference_jacobian, levenberg_marquardt
from .models import delta_phi_density

__all__ = [
    "FitOptions",
    "FitResult",
    "delta_phi_density",
    "dphi_histogram",
    "finite_difference_jacobian",
    "fit_angle_mixture",
    "fit_cos2",
    "fit_gaussian2d",
    "fit_lorentzian",
    "fit_phi_samples",
    "fit_saturation",
    "levenberg_marquardt",
    "poisson_weights",
]
