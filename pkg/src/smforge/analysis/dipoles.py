"""Dipole orientation maps and registration of nanocrystals onto a common frame."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..fitting import FitResult, fit_cos2, fit_lorentzian
from ..instrument import FrameStack
from ..rng import as_stream
from ..units import DomainError, axial_difference, wrap_axial
from .records import MoleculeRecord, record_arrays


def fit_dipoles(angles, rates) -> list[FitResult]:
    """cos^2 fit per row of ``rates`` (molecules x angles)."""
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    angles = np.asarray(angles, dtype=float)
    if rates.shape[1] != angles.size:
        raise DomainError("need one rate per angle for every molecule")
    return [fit_cos2(angles, row) for row in rates]


@dataclass
class DipoleOptions:
    window_gammas: float = 4.0  # half width of the spectral window, in linewidths
    aperture_sigmas: float = 1.5  # aperture half size in PSF sigmas
    max_phi_sigma: float = 10.0  # deg; worse fits are flagged


def _aperture(stack: FrameStack, x: float, y: float, half: int):
    cam = stack.camera
    H, W = cam.height, cam.width
    r = int(round((y - cam.origin[1]) / cam.pixel_size - 0.5))
    c = int(round((x - cam.origin[0]) / cam.pixel_size - 0.5))
    return slice(max(r - half, 0), min(r + half + 1, H)), slice(max(c - half, 0), min(c + half + 1, W))


def peak_rate(stack: FrameStack, rec: MoleculeRecord, options: Optional[DipoleOptions] = None,
              background: Optional[np.ndarray] = None) -> float:
    """Line peak above baseline for one molecule in one stack, in kcps.

    Forced photometry at the catalog position, averaged over sweeps. A free
    Lorentzian fit is used when the line is clear; otherwise the amplitude
    is solved linearly with the catalog center and width, which keeps
    near-orthogonal angles (almost no signal) unbiased.
    """
    opts = options or DipoleOptions()
    half = max(1, int(math.ceil(opts.aperture_sigmas * stack.camera.psf_sigma / stack.camera.pixel_size)))
    rs, cs = _aperture(stack, rec.x, rec.y, half)
    win = np.abs(stack.freq_axis - rec.f0) <= opts.window_gammas * rec.gamma
    if np.count_nonzero(win) < 8:
        raise DomainError(f"molecule {rec.id}: fewer than 8 frames in its spectral window")
    idx = np.flatnonzero(win)
    counts = stack.frames[idx][:, rs, cs].sum(axis=(1, 2)).astype(float)
    freq = stack.freq_axis[idx]
    uf, inv = np.unique(freq, return_inverse=True)
    spec = np.bincount(inv, weights=counts) / np.bincount(inv)
    per_kcps = 1e3 * stack.exposure
    if uf.size >= 8:
        lf = fit_lorentzian(freq=uf, rate=spec, counts_per_unit=float(np.bincount(inv).mean()))
        if "weak_amplitude" not in lf.flags and abs(lf["center"] - rec.f0) < 2 * rec.gamma:
            return lf["amplitude"] / per_kcps
    hw2 = 0.25 * rec.gamma**2
    shape = hw2 / ((uf - rec.f0) ** 2 + hw2)
    A = np.column_stack([shape, np.ones_like(shape)])
    amp = float(np.linalg.lstsq(A, spec, rcond=None)[0][0])
    return amp / per_kcps


def dipole_map(stacks: Sequence[FrameStack], records: Sequence[MoleculeRecord],
               options: Optional[DipoleOptions] = None) -> list[MoleculeRecord]:
    """Fill ``phi`` from per-angle peak rates; one stack per excitation angle."""
    opts = options or DipoleOptions()
    angles = np.array([float(s.theta_axis[0]) if len(s) else math.nan for s in stacks])
    if np.any(~np.isfinite(angles)):
        raise DomainError("empty polarization stack")
    if len({round(float(wrap_axial(a)), 9) for a in angles}) < 4:
        raise DomainError("need at least 4 distinct polarization angles")
    out = []
    for rec in records:
        rates = np.array([peak_rate(s, rec, opts) for s in stacks])
        fit = fit_cos2(angles, rates)
        flags = list(rec.flags)
        if not fit.converged or "phi_undetermined" in fit.flags or not fit.err("phi") <= opts.max_phi_sigma:
            flags.append("dipole_fit_failed")
        out.append(rec.with_(phi=fit["phi"], flags=tuple(flags)))
    return out


def circular_median_axial(phi) -> float:
    """Sample point minimising the summed axial distance to all others."""
    phi = np.asarray(phi, dtype=float)
    if phi.size == 0:
        raise DomainError("no angles")
    cost = np.abs(axial_difference(phi[:, None], phi[None, :])).sum(axis=1)
    return float(phi[int(np.argmin(cost))])


def modal_orientation(phi, tol: float = 15.0) -> float:
    """Most common axial orientation.

    The densest cluster is the largest set within ``tol`` degrees of one of
    the sample angles (ties go to the tighter cluster); its circular median
    is returned. Sideband angles and outliers outside the cluster are ignored.
    """
    phi = wrap_axial(np.asarray(phi, dtype=float))
    d = np.abs(axial_difference(phi[:, None], phi[None, :]))
    inside = d <= tol
    count = inside.sum(axis=1)
    spread = np.where(inside, d, 0.0).sum(axis=1)
    best = np.lexsort((spread, -count))[0]
    return float(wrap_axial(circular_median_axial(phi[inside[best]])))


@dataclass
class Registration:
    points: np.ndarray  # (n, 2) registered positions, nm
    phi: np.ndarray  # registered dipole angles, deg
    sigma: np.ndarray  # per-point PDF width, nm
    nc_id: np.ndarray
    record_id: np.ndarray
    orientation: dict[int, float] = field(default_factory=dict)  # modal angle per NC before rotation
    excluded: list[dict] = field(default_factory=list)

    def max_extent(self) -> float:
        """Largest within-NC pairwise distance."""
        best = 0.0
        for k in np.unique(self.nc_id):
            p = self.points[self.nc_id == k]
            if len(p) >= 2:
                d = np.hypot(*(p[:, None, :] - p[None, :, :]).transpose(2, 0, 1))
                best = max(best, float(d.max()))
        return best


def register_ncs(records: Sequence[MoleculeRecord], min_per_nc: int = 3, tol: float = 15.0) -> Registration:
    """Pool all NCs in a common frame.

    Per NC the mean position is subtracted and positions and dipoles are
    rotated so the modal dipole orientation lies along x, with the half-turn
    ambiguity of that axis settled by a non-negative third moment in x. NCs
    with fewer than ``min_per_nc`` usable molecules (assigned, with a finite
    angle, not ambiguous) are excluded and reported.
    """
    usable = [r for r in records if r.nc_id >= 0 and not math.isnan(r.phi) and not r.ambiguous]
    groups: dict[int, list[MoleculeRecord]] = {}
    for r in usable:
        groups.setdefault(r.nc_id, []).append(r)
    pts, phis, sig, ncs, ids = [], [], [], [], []
    orient, excluded = {}, []
    for k in sorted(groups):
        g = groups[k]
        if len(g) < min_per_nc:
            excluded.append({"nc_id": int(k), "count": len(g), "reason": f"fewer than {min_per_nc} molecules"})
            continue
        a = record_arrays(g)
        xy = np.column_stack([a["x"], a["y"]])
        xy = xy - xy.mean(axis=0)
        mode = modal_orientation(a["phi"], tol)
        c, s = math.cos(math.radians(-mode)), math.sin(math.radians(-mode))
        rot = xy @ np.array([[c, s], [-s, c]])
        # an axis has no sign; pick the half turn with non-negative skew along it
        if float(np.sum(rot[:, 0] ** 3)) < 0:
            rot = -rot
        pts.append(rot)
        phis.append(wrap_axial(a["phi"] - mode))
        sig.append(a["sigma"])
        ncs.append(np.full(len(g), k))
        ids.append(a["id"])
        orient[int(k)] = mode
    if not pts:
        return Registration(np.empty((0, 2)), np.empty(0), np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64),
                            orient, excluded)
    return Registration(np.vstack(pts), np.concatenate(phis), np.concatenate(sig), np.concatenate(ncs),
                        np.concatenate(ids), orient, excluded)


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


def permutation_test(reg: Registration, n_perm: int = 2000, rng=0) -> dict:
    """Is the registered angle correlated with x, y or radius?

    The statistic is the largest |Pearson r| over the three coordinates; its
    null distribution comes from shuffling angles across molecules.
    """
    if reg.phi.size < 3:
        raise DomainError("need at least 3 registered molecules")
    covs = {"x": reg.points[:, 0], "y": reg.points[:, 1], "r": np.hypot(reg.points[:, 0], reg.points[:, 1])}
    r_obs = {k: _pearson(reg.phi, v) for k, v in covs.items()}
    stat = max(abs(v) for v in r_obs.values())
    gen = as_stream(rng, "permutation").generator()
    hits = 0
    for _ in range(n_perm):
        p = gen.permutation(reg.phi)
        if max(abs(_pearson(p, v)) for v in covs.values()) >= stat:
            hits += 1
    return {"r": r_obs, "max_abs_r": stat, "p_value": (hits + 1) / (n_perm + 1), "n_perm": n_perm}
