"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line (collected again in the terminal
summary) and asserts at the stated tolerance.
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats
from scipy.special import erf

from smforge import pipeline as pl
from smforge.analysis import close_pair_count, expected_close_pairs, pair_statistics
from smforge.analysis.records import MoleculeRecord
from smforge.cli import main
from smforge.config import load_config, parse_config
from smforge.fitting import fit_lorentzian
from smforge.fitting import models
from smforge.fitting.fits import fit_gaussian2d
from smforge.instrument import Mode, ScanConfig, simulate_confocal_trace
from smforge.photophysics import EmitterParams, broadened_linewidth, saturated_rate
from smforge.rng import Stream
from smforge.sample import sample_from_emitters

pytestmark = pytest.mark.slow

TESTS = Path(__file__).parent


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def _cfg(scenario_path, name, **changes):
    d = json.loads(Path(scenario_path(name)).read_text())
    for path, value in changes.items():
        node = d
        keys = path.split("__")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return parse_config(d)


def test_c1_saturation_algebra(report):
    e = EmitterParams(f0=381.9e6, gamma0=41.0, p_sat=3.6, f_inf=257.0)
    g = broadened_linewidth(95.0, e)
    f = saturated_rate(95.0, e)
    # oracle: the closed forms evaluated directly
    g_oracle = 41.0 * math.sqrt((95.0 + 3.6) / 3.6)
    f_oracle = 257.0 * 95.0 / (95.0 + 3.6)
    ok = (abs(g - 214.6) <= 0.1 and abs(f - 247.6) <= 0.1
          and g == pytest.approx(g_oracle, rel=1e-12) and f == pytest.approx(f_oracle, rel=1e-12))
    report("C1 saturation algebra", ok, f"gamma(95 nW) = {g:.3f} MHz, F(95 nW) = {f:.3f} kcps")
    assert ok


def test_c2_saturation_roundtrip(report, scenario_path):
    with Timer() as t:
        cfg = load_config(scenario_path("fig4_saturation"))
        sample = pl.make_sample(cfg)
        noisy = pl.saturation_report(cfg, sample, pl.run_saturation(cfg, sample))[0]
        quiet_cfg = _cfg(scenario_path, "fig4_saturation", instrument__saturation__scan__noise=False)
        quiet = pl.saturation_report(quiet_cfg, sample, pl.run_saturation(quiet_cfg, sample))[0]
    rel_noisy = max(abs(v) for v in noisy["rel_error"].values())
    rel_quiet = max(abs(v) for v in quiet["rel_error"].values())
    ok = rel_noisy <= 0.10 and rel_quiet <= 1e-6 and t.seconds < 10
    fit = noisy["fit"]
    report("C2 saturation roundtrip", ok,
           f"gamma0 {fit['gamma0']:.2f} MHz, P_sat {fit['p_sat']:.3f} nW, F_inf {fit['f_inf']:.1f} kcps, "
           f"max rel err {rel_noisy:.3f} (noiseless {rel_quiet:.1e}), {t.seconds:.1f} s")
    assert ok


def _line_28(noise: bool, seed: int):
    # high-resolution scan: 1 MHz steps of 10 ms at 1 nW, about 560 counts at the line peak
    p, ps = 1.0, 3.6
    g0 = 28.0 / math.sqrt((p + ps) / ps)
    e = EmitterParams(f0=381.9e6, gamma0=g0, p_sat=ps, f_inf=257.0)
    sample = sample_from_emitters([e], [(0.0, 0.0)])
    scan = ScanConfig(e.f0 - 150, e.f0 + 150, 100.0, 0.01, repetitions=1, power=p, mode=Mode.CONFOCAL, noise=noise)
    tr = simulate_confocal_trace(sample, 0, scan, Stream(seed, ("line28",)))[0]
    return fit_lorentzian(tr)


def test_c3_linewidth(report):
    with Timer() as t:
        exact = _line_28(False, 0)["fwhm"]
        fits = [_line_28(True, k)["fwhm"] for k in range(100)]
    err = float(np.mean(np.abs(np.array(fits) - 28.0)))
    ok = abs(exact - 28.0) <= 1e-6 * 28.0 and err <= 1.0 and t.seconds < 30
    report("C3 linewidth", ok, f"noiseless {exact:.9f} MHz, Poisson mean |dgamma| {err:.3f} MHz over 100 runs, "
                               f"{t.seconds:.1f} s")
    assert ok


def _precision(n_photons: int, reps: int, psf: float = 130.0, pixel: float = 100.0, bg: float = 0.1) -> float:
    gen = Stream(4, ("precision", n_photons)).generator()
    edges = np.arange(12) * pixel
    err = np.empty(reps)
    for k in range(reps):
        x0, y0 = 550.0 + gen.uniform(-50, 50), 550.0 + gen.uniform(-50, 50)
        mu = models.gaussian2d_model([x0, y0, psf, psf, n_photons, bg], edges, edges)
        fit = fit_gaussian2d(gen.poisson(mu), pixel, weighting="mle")
        err[k] = fit["x0"] - x0
    return float(np.std(err, ddof=1))


def test_c4_localization(report, scenario_path):
    with Timer() as t:
        cfg = load_config(scenario_path("fig2_microcrystal"))
        sample = pl.make_sample(cfg)
        stack = pl.simulate_widefield(cfg, sample)
        run = pl.analyze_stack(stack, cfg)
        a, b = pl.best_pair(run)
        seps = pl.paired_separations(run, a, b)
        sep, se = float(np.mean(seps)), float(np.std(seps, ddof=1) / math.sqrt(seps.size))
        ratios = {n: _precision(n, 1000) * math.sqrt(n) / 130.0 for n in (100, 1000, 10000)}
    ok_sep = abs(sep - 69.0) <= 2 * 4.0 and se <= 4.0
    ok_scale = all(abs(r - 1.0) <= 0.20 for r in ratios.values())
    ok = ok_sep and ok_scale and t.seconds < 120
    report("C4 localization", ok,
           f"separation {sep:.1f} +- {se:.1f} nm (n={seps.size}); sigma*sqrt(N)/sigma_psf = "
           + ", ".join(f"{r:.3f} @ N={n}" for n, r in ratios.items()) + f"; {t.seconds:.1f} s")
    assert ok


def test_c5_spectral_diffusion(report, scenario_path):
    with Timer() as t:
        cfg = load_config(scenario_path("fig4_diffusion"))
        sample = pl.make_sample(cfg)
        runs = pl.run_diffusion(cfg, sample)
    by_id = {r.emitter_id: r.stat for r in runs}
    one = by_id[0]
    cohort = [by_id[i] for i in range(1, 16)]
    med = float(np.median([s.sigma_f for s in cohort]))
    ratio = float(np.median([s.normalized_range for s in cohort]))
    ok = (one.n_scans == 1600 and abs(one.sigma_f / 26.0 - 1) <= 0.10 and abs(med / 48.0 - 1) <= 0.15
          and abs(ratio / 1.08 - 1) <= 0.20 and t.seconds < 120)
    report("C5 spectral diffusion", ok,
           f"sigma_f {one.sigma_f:.2f} MHz from {one.n_scans} scans; cohort median {med:.2f} MHz, "
           f"median 2 sigma_f/gamma {ratio:.3f}; {t.seconds:.1f} s")
    assert ok


def test_c6_dipole_mixture(report, scenario_path):
    with Timer() as t:
        cfg = load_config(scenario_path("fig5_dipoles"))
        sample = pl.make_sample(cfg)
        run = pl.run_dipoles(cfg, sample)
    f = run.mixture
    ok = (run.n_pairs >= 7700 and f is not None and 0.55 <= f["a"] <= 0.71 and 26 <= f["phi_prime"] <= 32
          and 4.5 <= f["sigma0"] <= 7.5 and 9 <= f["sigma1"] <= 16 and t.seconds < 180)
    report("C6 dipole mixture", ok,
           f"{run.n_pairs} pairs; a {f['a']:.3f}, phi' {f['phi_prime']:.2f}, sigma0 {f['sigma0']:.2f}, "
           f"sigma1 {f['sigma1']:.2f}; {t.seconds:.1f} s")
    assert ok


def _uniform_catalog(n, side, seed):
    gen = Stream(seed, ("uniform",)).generator()
    xy = gen.uniform(0, side, (n, 2))
    f = 381.9e6 + gen.uniform(0, 100e3, n)  # 100 GHz band
    return [MoleculeRecord(i, xy[i, 0], xy[i, 1], 5.0, f[i], 40.0) for i in range(n)]


def test_c7_pair_statistics(report, scenario_path):
    with Timer() as t:
        # flat corrected histogram for a uniform catalog
        recs = _uniform_catalog(6000, 30000.0, 1)
        h = pair_statistics(recs, 150.0, 5.0, 10.0, df_max_ghz=100.0)
        per_r = h.counts.sum(axis=1)
        area = np.diff(h.r_edges**2)
        exp = per_r.sum() * area / area.sum()
        p_flat = float(stats.chi2.sf(((per_r - exp) ** 2 / exp).sum(), per_r.size - 1))

        # close-pair count against the closed form on the microcrystal ground truth
        cfg = load_config(scenario_path("fig2_microcrystal"))
        sample = pl.make_sample(cfg)
        arr = sample.arrays
        exact = [MoleculeRecord(int(i), float(x), float(y), 1e-6, float(f), 40.0)
                 for i, x, y, f in zip(arr["id"], arr["x"], arr["y"], arr["f0"])]
        observed = close_pair_count(exact, 10.0, 10.0)
        side = 2.0 * cfg.sample.nc_radius_nm
        sites = cfg.sample.sites
        expected = 0.0
        for blue, width in ((True, sites.ib_width_blue_ghz), (False, sites.ib_width_red_ghz)):
            n = int(np.count_nonzero(arr["blue"] == blue))
            # difference of two normal draws has sd width * sqrt(2)
            p_df = float(erf(10.0 / (2.0 * width)))
            expected += expected_close_pairs(n, side * side, 10.0, p_df, side_nm=side)
        z = (observed - expected) / math.sqrt(expected)

        # the same scene through the localization-level catalog
        catalog_count = close_pair_count(pl.truth_catalog(cfg, sample), 10.0, 10.0)
    ok = (p_flat > 0.01 and abs(z) <= 3.0 and 10**2.5 <= catalog_count <= 10**3.5 and t.seconds < 120)
    report("C7 pair statistics", ok,
           f"flatness p {p_flat:.3f}; close pairs {observed} vs closed form {expected:.1f} (z {z:+.2f}); "
           f"microcrystal catalog {catalog_count} close pairs; {t.seconds:.1f} s")
    assert ok


def test_c8_registration(report, scenario_path):
    counts = [5] * 17 + [4] * 44
    with Timer() as t:
        cfg = _cfg(scenario_path, "fig5_dipoles", sample__grid=[61, 1], sample__emitters_per_nc={"counts": counts})
        sample = pl.make_sample(cfg)
        run = pl.run_dipoles(cfg, sample)
        rep = pl.dipole_report(cfg, sample, run)["registration"]
    n_mol = len(sample.emitters)
    ok = (n_mol == 261 and rep["max_extent_nm"] <= 910.0 and rep["p_value"] > 0.01 and t.seconds < 60)
    report("C8 registration", ok,
           f"{len(sample.nanocrystals)} NCs, {n_mol} molecules, {rep['n_points']} registered; max extent "
           f"{rep['max_extent_nm']:.1f} nm; permutation p {rep['p_value']:.3f}; {t.seconds:.1f} s")
    assert ok


def test_c9_property_suites(report, tmp_path):
    with Timer() as t:
        r = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
             str(TESTS / "test_units.py"), str(TESTS / "test_lm.py"), str(TESTS / "test_kernels.py"),
             str(TESTS / "test_instrument.py")],
            capture_output=True, text=True, cwd=TESTS.parent,
        )
        cfg = {
            "seed": 9,
            "sample": {"emitters_per_nc": {"fixed": 4}, "sigma_f_mhz": {"median": 20.0}},
            "instrument": {
                "camera": {"width": 24, "height": 24},
                "widefield": {"f_start_thz": 381.8995, "f_stop_thz": 381.9005, "repetitions": 3},
            },
        }
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(cfg))
        digests = []
        for threads in (1, 2, 8):
            out = tmp_path / f"t{threads}"
            assert main(["simulate", "--config", str(cfg_path), "--out", str(out), "--threads", str(threads)]) == 0
            m = json.loads((out / "manifest.json").read_text())
            digests.append({f["path"]: f["sha256"] for f in m["outputs"]})
    same = digests[0] == digests[1] == digests[2]
    summary = r.stdout.strip().splitlines()[-1] if r.stdout.strip() else r.stderr[-200:]
    ok = r.returncode == 0 and same and t.seconds < 120
    report("C9 property suites", ok, f"{summary}; outputs identical at 1/2/8 threads: {same}; {t.seconds:.1f} s")
    assert ok
