"""Scenario stages: simulate a configured measurement and reduce it.

Each ``run_*`` function takes a validated ScenarioConfig and returns plain
results; the command line layer only adds file IO on top.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .analysis import (
    CatalogOptions,
    MoleculeRecord,
    catalog_from_truth,
    close_pair_count,
    cohort_summary,
    diffusion_stats,
    dipole_map,
    match_to_truth,
    pair_statistics,
    permutation_test,
    register_ncs,
)
from .analysis.catalog import SPOT_RADIUS_SIGMAS, localize_events, merge_events
from .config import ConfigError, ScenarioConfig
from .fitting import FitResult, dphi_histogram, fit_angle_mixture, fit_cos2, fit_lorentzian, fit_saturation
from .instrument import (
    CameraConfig,
    FrameStack,
    Mode,
    ScanConfig,
    ScanTrace,
    simulate_confocal_trace,
    simulate_polarization_series,
    simulate_saturation_series,
    simulate_widefield_scan,
)
from .photophysics import polarization_factor, saturated_rate
from .rng import Stream
from .sample import Sample, synthesize
from .units import DomainError, axial_difference


def _need(block, name: str):
    if block is None:
        raise ConfigError([{"loc": f"instrument.{name}", "msg": f"scenario has no {name} block", "type": "missing"}])
    return block


def make_sample(cfg: ScenarioConfig, threads: int = 1) -> Sample:
    return synthesize(cfg.sample, cfg.seed, threads)


def _root(cfg: ScenarioConfig, *parts) -> Stream:
    return Stream(cfg.seed, ("instrument",) + parts)


def camera_for(cfg: ScenarioConfig, sample: Sample) -> CameraConfig:
    return CameraConfig.from_model(cfg.instrument.camera, sample)


def catalog_options(cfg: ScenarioConfig) -> CatalogOptions:
    return CatalogOptions.from_config(cfg.analysis, cfg.instrument.camera.psf_sigma_nm)


# wide-field imaging

def simulate_widefield(cfg: ScenarioConfig, sample: Sample, threads: int = 1) -> FrameStack:
    scan = ScanConfig.from_model(_need(cfg.instrument.widefield, "widefield"), Mode.WIDEFIELD)
    return simulate_widefield_scan(sample, scan, camera_for(cfg, sample), _root(cfg, "widefield"), threads)


@dataclass
class CatalogRun:
    records: list[MoleculeRecord]
    events: list
    groups: list[list[int]]


def analyze_stack(stack: FrameStack, cfg: ScenarioConfig) -> CatalogRun:
    opts = catalog_options(cfg)
    events = localize_events(stack, opts)
    records, groups = merge_events(events, opts)
    return CatalogRun(records, events, groups)


def best_pair(run: CatalogRun) -> tuple[int, int]:
    """The two records seen in the most sweeps."""
    if len(run.records) < 2:
        raise DomainError("need at least 2 records")
    order = sorted(range(len(run.records)), key=lambda i: (-run.records[i].n_loc, i))
    return order[0], order[1]


def paired_separations(run: CatalogRun, a: int, b: int) -> np.ndarray:
    """Per-sweep distance between records ``a`` and ``b`` (sweeps where both were localized)."""
    ea = {run.events[i].sweep: run.events[i] for i in run.groups[a]}
    eb = {run.events[i].sweep: run.events[i] for i in run.groups[b]}
    common = sorted(set(ea) & set(eb))
    return np.array([math.hypot(ea[k].x - eb[k].x, ea[k].y - eb[k].y) for k in common])


def in_window_truth(sample: Sample, stack: FrameStack, margin_gammas: float = 3.0) -> list[int]:
    """Emitters whose line lies inside the scanned frequency range."""
    lo, hi = float(stack.freq_axis.min()), float(stack.freq_axis.max())
    a = sample.arrays
    ok = (a["f0"] - margin_gammas * a["gamma0"] >= lo) & (a["f0"] + margin_gammas * a["gamma0"] <= hi)
    return a["id"][ok].tolist()


def resolvable_truth(sample: Sample, ids, psf_sigma: float) -> list[int]:
    """Subset of ``ids`` whose lines do not overlap another emitter within one diffraction spot."""
    a = sample.arrays
    pos = {int(i): k for k, i in enumerate(a["id"])}
    keep = []
    idx = [pos[i] for i in ids]
    for k in idx:
        d = np.hypot(a["x"] - a["x"][k], a["y"] - a["y"][k])
        df = np.abs(a["f0"] - a["f0"][k])
        clash = (d < SPOT_RADIUS_SIGMAS * psf_sigma) & (df < a["gamma0"] + a["gamma0"][k] + 6.0 * (a["sigma_f"] + a["sigma_f"][k]))
        clash[k] = False
        if not np.any(clash):
            keep.append(int(a["id"][k]))
    return keep


def drift_corrected(run: CatalogRun, stack: FrameStack) -> list[MoleculeRecord]:
    """Records shifted back by the mean injected drift over the frames they were seen in."""
    if stack.drift is None:
        return list(run.records)
    out = []
    for rec, g in zip(run.records, run.groups):
        d = np.concatenate([stack.drift[run.events[i].first:run.events[i].last + 1] for i in g]).mean(axis=0)
        out.append(rec.with_(x=rec.x - float(d[0]), y=rec.y - float(d[1])))
    return out


def detectable_truth(cfg: ScenarioConfig, sample: Sample, ids, margin: float = 2.0) -> list[int]:
    """Subset of ``ids`` bright enough to clear the detection threshold by ``margin``.

    Dipoles nearly orthogonal to the excitation polarization stay dark; they
    are not expected in the catalog. The estimate uses the peak counts per
    frame and the matched filter gain ``sqrt(frame_smooth * sum k^2 / bg)``
    with ``sum k^2 ~ 1 / (4 pi s^2)`` for a Gaussian of ``s`` pixels.
    """
    scan = _need(cfg.instrument.widefield, "widefield")
    cam = cfg.instrument.camera
    s_px = cam.psf_sigma_nm / cam.pixel_size_nm
    gain = math.sqrt(CatalogOptions.frame_smooth / (4.0 * math.pi * s_px**2 * max(cam.background, 0.5)))
    keep = []
    for i in ids:
        e = sample.emitter(i).params
        counts = float(saturated_rate(scan.power_nw * polarization_factor(e.phi, scan.theta_exc_deg), e)) * 1e3 * scan.exposure_s
        if counts * gain >= margin * cfg.analysis.detection_snr:
            keep.append(int(i))
    return keep


def widefield_report(cfg: ScenarioConfig, sample: Sample, stack: FrameStack, run: CatalogRun) -> dict:
    """Compare a catalog with ground truth; positions are compared after removing the known drift."""
    tol = cfg.tolerances
    truth = resolvable_truth(sample, in_window_truth(sample, stack), cfg.instrument.camera.psf_sigma_nm)
    truth = detectable_truth(cfg, sample, truth)
    records = drift_corrected(run, stack)
    m = match_to_truth(records, sample, cfg.analysis.match_position_nm, cfg.analysis.match_gamma_factor, truth)
    a = sample.arrays
    pos = {int(i): k for k, i in enumerate(a["id"])}
    errs = [math.hypot(records[i].x - a["x"][pos[t]], records[i].y - a["y"][pos[t]]) for i, t in m.pairs]
    lw = [abs(run.records[i].gamma / a["gamma0"][pos[t]] - 1.0) for i, t in m.pairs]
    return {
        "n_records": len(run.records),
        "n_events": len(run.events),
        "n_truth_resolvable": len(truth),
        "n_matched": len(m.pairs),
        "recall": m.recall,
        "recall_ok": m.recall >= tol.recall,
        "median_position_error_nm": float(np.median(errs)) if errs else None,
        "position_ok": bool(errs) and float(np.median(errs)) <= tol.position_nm,
        "median_linewidth_rel_dev": float(np.median(lw)) if lw else None,
        "missed": m.missed,
        "spurious": m.spurious,
    }


# confocal traces

def _confocal_scan(model, e) -> ScanConfig:
    return ScanConfig.from_model(model, Mode.CONFOCAL, center_mhz=e.params.f0)


def trace_peak_rate(trace: ScanTrace, f0_hint: float, gamma_hint: float) -> tuple[float, Optional[FitResult]]:
    """Peak rate of one line; falls back to a fixed-shape linear fit when the line is too weak to fit freely."""
    fit = fit_lorentzian(trace)
    if "weak_amplitude" not in fit.flags and abs(fit["center"] - f0_hint) < 6.0 * gamma_hint:
        return fit["amplitude"], fit
    hw2 = 0.25 * gamma_hint**2
    shape = hw2 / ((trace.freq - f0_hint) ** 2 + hw2)
    A = np.column_stack([shape, np.ones_like(shape)])
    return float(np.linalg.lstsq(A, trace.rate, rcond=None)[0][0]), None


@dataclass
class SaturationRun:
    powers: np.ndarray
    traces: list[ScanTrace]
    line_fits: list[FitResult]
    fit: FitResult
    emitter_id: int


def run_saturation(cfg: ScenarioConfig, sample: Sample, threads: int = 1) -> list[SaturationRun]:
    block = _need(cfg.instrument.saturation, "saturation")
    out = []
    for eid in block.emitter_ids:
        e = sample.emitter(eid)
        scan = _confocal_scan(block.scan, e)
        series = simulate_saturation_series(sample, eid, block.powers_nw, scan, _root(cfg, "saturation", eid), threads)
        fits = [fit_lorentzian(tr) for _, tr in series]
        powers = np.array([p for p, _ in series])
        peaks = np.array([f["amplitude"] for f in fits])
        widths = np.array([f["fwhm"] for f in fits])
        sp = np.array([f.err("amplitude") for f in fits])
        sw = np.array([f.err("fwhm") for f in fits])
        noiseless = not block.scan.noise
        fs = fit_saturation(powers, peaks, widths, None if noiseless else sp, None if noiseless else sw)
        out.append(SaturationRun(powers, [tr for _, tr in series], fits, fs, eid))
    return out


def saturation_report(cfg: ScenarioConfig, sample: Sample, runs: list[SaturationRun]) -> list[dict]:
    tol = cfg.tolerances.saturation_rel
    rows = []
    for r in runs:
        e = sample.emitter(r.emitter_id).params
        truth = {"f_inf": e.f_inf, "p_sat": e.p_sat, "gamma0": e.gamma0}
        rel = {k: r.fit[k] / v - 1.0 for k, v in truth.items()}
        rows.append({
            "emitter_id": r.emitter_id,
            "fit": {k: r.fit[k] for k in truth},
            "sigma": {k: r.fit.err(k) for k in truth},
            "truth": truth,
            "rel_error": rel,
            "ok": all(abs(v) <= tol for v in rel.values()),
        })
    return rows


@dataclass
class DiffusionRun:
    emitter_id: int
    centers: np.ndarray
    widths: np.ndarray
    stat: object


def run_diffusion(cfg: ScenarioConfig, sample: Sample, threads: int = 1) -> list[DiffusionRun]:
    block = _need(cfg.instrument.confocal, "confocal")
    out = []
    for eid in block.emitter_ids:
        e = sample.emitter(eid)
        scan = _confocal_scan(block.scan, e)
        traces = simulate_confocal_trace(sample, eid, scan, _root(cfg, "confocal"), threads)
        fits = [fit_lorentzian(t) for t in traces]
        centers = np.array([f["center"] for f in fits])
        widths = np.array([f["fwhm"] for f in fits])
        out.append(DiffusionRun(eid, centers, widths, diffusion_stats(centers, float(np.median(widths)), eid)))
    return out


def diffusion_report(cfg: ScenarioConfig, sample: Sample, runs: list[DiffusionRun]) -> dict:
    tol = cfg.tolerances.sigma_f_rel
    rows = []
    for r in runs:
        e = sample.emitter(r.emitter_id).params
        rel = r.stat.sigma_f / e.sigma_f - 1.0 if e.sigma_f > 0 else None
        rows.append({
            "emitter_id": r.emitter_id,
            "sigma_f": r.stat.sigma_f,
            "sigma_f_truth": e.sigma_f,
            "gamma": r.stat.gamma,
            "normalized_range": r.stat.normalized_range,
            "n_scans": r.stat.n_scans,
            "rel_error": rel,
        })
    truth_med = float(np.median([sample.emitter(r.emitter_id).params.sigma_f for r in runs]))
    summary = cohort_summary([r.stat for r in runs])
    med_rel = summary["sigma_f_median"] / truth_med - 1.0 if truth_med > 0 else None
    return {
        "molecules": rows,
        "cohort": summary,
        "sigma_f_median_truth": truth_med,
        "median_rel_error": med_rel,
        "ok": med_rel is not None and abs(med_rel) <= tol,
    }


# dipoles

@dataclass
class DipoleRun:
    records: list[MoleculeRecord]
    phi_fits: list[Optional[FitResult]]
    dphi: np.ndarray
    mixture: Optional[FitResult]
    n_pairs: int


def within_nc_dphi(records) -> np.ndarray:
    """|axial difference| for every within-NC pair of usable records."""
    groups: dict[int, list[float]] = {}
    for r in records:
        if r.nc_id >= 0 and not math.isnan(r.phi) and "dipole_fit_failed" not in r.flags and not r.ambiguous:
            groups.setdefault(r.nc_id, []).append(r.phi)
    out = []
    for k in sorted(groups):
        p = np.array(groups[k])
        i, j = np.triu_indices(p.size, 1)
        out.append(np.abs(axial_difference(p[i], p[j])))
    return np.concatenate(out) if out else np.empty(0)


def mixture_from_records(records, bin_width: float = 2.5):
    dphi = within_nc_dphi(records)
    counts, edges = dphi_histogram(dphi, bin_width)
    fit = None
    if dphi.size >= 1000:
        fit = fit_angle_mixture(counts, edges)
    return dphi, counts, edges, fit


def measure_dipoles(cfg: ScenarioConfig, sample: Sample, threads: int = 1) -> tuple[list[MoleculeRecord], list]:
    """Per-molecule dipole angles from confocal line scans at each excitation angle."""
    block = _need(cfg.instrument.polarization, "polarization")
    angles = np.array(block.angles_deg, dtype=float)
    truth = catalog_from_truth(sample, cfg.analysis.truth_position_sigma_nm, 0.0, Stream(cfg.seed, ("catalog",)),
                               with_phi=False, threshold_thz=cfg.analysis.site_threshold_thz)
    root = _root(cfg, "polarization")
    recs, fits = [], []
    for rec in truth:
        e = sample.emitter(rec.id)
        base = _confocal_scan(block.scan, e)
        rates = []
        for k, th in enumerate(angles):
            tr = simulate_confocal_trace(sample, rec.id, base.with_(theta_exc=float(th)), root.child(k), 1)[0]
            rates.append(trace_peak_rate(tr, e.params.f0, e.params.gamma0)[0])
        fit = fit_cos2(angles, np.array(rates))
        flags = () if fit.converged and "phi_undetermined" not in fit.flags else ("dipole_fit_failed",)
        recs.append(rec.with_(phi=fit["phi"], flags=flags))
        fits.append(fit)
    return recs, fits


def measure_dipoles_widefield(cfg: ScenarioConfig, sample: Sample, threads: int = 1):
    block = _need(cfg.instrument.polarization, "polarization")
    scan = ScanConfig.from_model(block.scan, Mode.WIDEFIELD)
    stacks = simulate_polarization_series(sample, block.angles_deg, scan, camera_for(cfg, sample),
                                          _root(cfg, "polarization"), threads)
    merged = FrameStack(np.concatenate([s.frames for s in stacks]), np.concatenate([s.freq_axis for s in stacks]),
                        np.concatenate([s.theta_axis for s in stacks]), stacks[0].camera, stacks[0].exposure)
    records = analyze_stack(merged, cfg).records
    return dipole_map(stacks, records), stacks


def run_dipoles(cfg: ScenarioConfig, sample: Sample, threads: int = 1) -> DipoleRun:
    block = _need(cfg.instrument.polarization, "polarization")
    if block.scan.span_mhz is not None and block.scan.f_start_thz is None:
        records, fits = measure_dipoles(cfg, sample, threads)
    else:
        records, _ = measure_dipoles_widefield(cfg, sample, threads)
        fits = [None] * len(records)
    dphi, _, _, fit = mixture_from_records(records, cfg.analysis.dphi_bin_deg)
    return DipoleRun(records, fits, dphi, fit, int(dphi.size))


def dipole_report(cfg: ScenarioConfig, sample: Sample, run: DipoleRun) -> dict:
    tol = cfg.tolerances
    errs = []
    for r in run.records:
        if "dipole_fit_failed" not in r.flags and not r.ambiguous:
            try:
                errs.append(abs(float(axial_difference(r.phi, sample.emitter(r.id).params.phi))))
            except LookupError:
                pass
    out = {
        "n_records": len(run.records),
        "n_pairs": run.n_pairs,
        "median_phi_error_deg": float(np.median(errs)) if errs else None,
        "phi_ok": bool(errs) and float(np.median(errs)) <= tol.phi_deg,
    }
    if run.mixture is not None:
        f = run.mixture
        ranges = {"a": tol.mixture_a, "sigma0": tol.mixture_sigma0, "phi_prime": tol.mixture_phi_prime,
                  "sigma1": tol.mixture_sigma1}
        out["mixture"] = {k: f[k] for k in ranges}
        out["mixture_sigma"] = {k: f.err(k) for k in ranges}
        out["mixture_ok"] = all(lo <= f[k] <= hi for k, (lo, hi) in ranges.items())
    else:
        out["mixture"] = None
        out["mixture_ok"] = None
    reg = register_ncs(run.records, cfg.analysis.min_per_nc)
    if reg.phi.size >= 3:
        pt = permutation_test(reg, cfg.analysis.permutations, Stream(cfg.seed, ("permutation",)))
        out["registration"] = {"n_points": int(reg.phi.size), "n_nc": len(reg.orientation),
                               "excluded": reg.excluded, "max_extent_nm": reg.max_extent(), **pt}
    return out


# pairs

def truth_catalog(cfg: ScenarioConfig, sample: Sample) -> list[MoleculeRecord]:
    return catalog_from_truth(sample, cfg.analysis.truth_position_sigma_nm, cfg.analysis.truth_phi_sigma_deg,
                              Stream(cfg.seed, ("catalog",)), threshold_thz=cfg.analysis.site_threshold_thz)


def pair_report(cfg: ScenarioConfig, records) -> tuple[dict, object]:
    an = cfg.analysis
    if len(records) < 2:
        raise DomainError("need at least 2 records for pair statistics")
    hist = pair_statistics(records, an.pair_max_sep_nm, an.pair_r_bin_nm, an.pair_df_bin_ghz)
    close = close_pair_count(records, an.close_r_nm, an.close_df_ghz)
    n_red = sum(r.site == "red" for r in records)
    return {
        "n_records": len(records),
        "n_red": n_red,
        "n_blue": len(records) - n_red,
        "n_pairs_within_max_sep": len(hist.pairs),
        "close_pairs": close,
        "close_r_nm": an.close_r_nm,
        "close_df_ghz": an.close_df_ghz,
    }, hist
