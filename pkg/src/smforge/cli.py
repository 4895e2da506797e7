"""smforge command line.

Exit codes: 0 success, 2 config error, 3 format error, 4 acceptance failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__, _kernels
from . import pipeline as pl
from .analysis import (
    catalog_to_json,
    read_catalog_csv,
    register_ncs,
    render_superres,
    write_catalog_csv,
    write_pgm,
)
from .config import ConfigError, ScenarioConfig, canonical_json, load_config
from .instrument import read_smfs, write_smfs, write_traces_csv
from .units import DomainError, FormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_ACCEPTANCE = 4

MANIFEST = "manifest.json"


def _clean(obj):
    """Make results JSON-safe: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Outputs:
    """Stage files in a scratch directory; publish them only if the command succeeds."""

    def __init__(self, out: Path):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.tmp / name

    def publish(self, manifest: dict) -> None:
        files = []
        for name in sorted(set(self.names)):
            p = self.tmp / name
            files.append({"path": name, "sha256": sha256_file(p), "bytes": p.stat().st_size})
        manifest["outputs"] = files
        dump_json(manifest, self.tmp / MANIFEST)
        for name in sorted(set(self.names)) + [MANIFEST]:
            os.replace(self.tmp / name, self.out / name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        bad = verify_manifest(self.out)
        if bad:
            raise RuntimeError(f"digest mismatch after write: {bad}")

    def discard(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def verify_manifest(out) -> list[str]:
    """Names of listed outputs whose digest no longer matches."""
    m = json.loads((Path(out) / MANIFEST).read_text())
    return [f["path"] for f in m["outputs"] if sha256_file(Path(out) / f["path"]) != f["sha256"]]


def _manifest(cmd: str, cfg: ScenarioConfig, threads: int, started: str, extra: Optional[dict] = None) -> dict:
    m = {
        "tool": "smforge",
        "version": __version__,
        "command": cmd,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "config": cfg.materialized(),
        "threads": threads,
        "kernel_backend": _kernels.BACKEND,
        "started": started,
        "finished": _now(),
    }
    if extra:
        m.update(extra)
    return m


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_hist(path, hist, which: str) -> None:
    data = hist.counts if which == "raw" else hist.corrected
    header = ["r_lo_nm", "r_hi_nm"] + [f"df_{a:g}_{b:g}_ghz" for a, b in zip(hist.df_edges[:-1], hist.df_edges[1:])]
    rows = [[float(hist.r_edges[i]), float(hist.r_edges[i + 1]), *[float(v) for v in data[i]]]
            for i in range(data.shape[0])]
    _write_rows(path, header, rows)


def _write_pairs(outs: Outputs, hist) -> None:
    _write_rows(outs.path("pairs.csv"), ["id_a", "id_b", "distance_nm", "detuning_ghz"],
                ([int(a), int(b), float(r), float(d)] for a, b, r, d in
                 zip(hist.pairs.id_a, hist.pairs.id_b, hist.pairs.distance, hist.pairs.detuning)))
    _write_hist(outs.path("pair_hist.csv"), hist, "raw")
    _write_hist(outs.path("pair_hist_corrected.csv"), hist, "corrected")


# commands

def cmd_simulate(cfg: ScenarioConfig, outs: Outputs, args) -> dict:
    sample = pl.make_sample(cfg, args.threads)
    outs.path("truth.json").write_text(sample.to_json())
    inst = cfg.instrument
    written = {"emitters": len(sample.emitters)}
    if inst.widefield is not None:
        stack = pl.simulate_widefield(cfg, sample, args.threads)
        write_smfs(stack, outs.path("stack.smfs"))
        _write_rows(outs.path("drift_truth.csv"), ["frame", "dx_nm", "dy_nm"],
                    ([i, float(d[0]), float(d[1])] for i, d in enumerate(stack.drift)))
        written["frames"] = len(stack)
    if inst.confocal is not None:
        from .instrument import simulate_confocal_trace

        for eid in inst.confocal.emitter_ids:
            scan = pl._confocal_scan(inst.confocal.scan, sample.emitter(eid))
            traces = simulate_confocal_trace(sample, eid, scan, pl._root(cfg, "confocal"), args.threads)
            write_traces_csv(traces, outs.path(f"confocal_e{eid}.csv"))
    if inst.saturation is not None:
        from .instrument import simulate_saturation_series

        for eid in inst.saturation.emitter_ids:
            scan = pl._confocal_scan(inst.saturation.scan, sample.emitter(eid))
            series = simulate_saturation_series(sample, eid, inst.saturation.powers_nw, scan,
                                                pl._root(cfg, "saturation", eid), args.threads)
            for k, (p, tr) in enumerate(series):
                write_traces_csv([tr], outs.path(f"saturation_e{eid}_p{k}.csv"))
    if inst.polarization is not None and inst.polarization.scan.f_start_thz is not None:
        from .instrument import Mode, ScanConfig, simulate_polarization_series

        scan = ScanConfig.from_model(inst.polarization.scan, Mode.WIDEFIELD)
        stacks = simulate_polarization_series(sample, inst.polarization.angles_deg, scan, pl.camera_for(cfg, sample),
                                              pl._root(cfg, "polarization"), args.threads)
        for k, st in enumerate(stacks):
            write_smfs(st, outs.path(f"polarization_{k:02d}.smfs"))
    return written


def _catalog_outputs(outs: Outputs, cfg: ScenarioConfig, records, extra_summary: dict) -> dict:
    write_catalog_csv(records, outs.path("catalog.csv"))
    outs.path("catalog.json").write_text(catalog_to_json(records))
    summary = dict(extra_summary)
    summary["n_records"] = len(records)
    if records:
        g = np.array([r.gamma for r in records])
        s = np.array([r.position_sigma for r in records])
        summary.update({
            "n_red": sum(r.site == "red" for r in records),
            "n_blue": sum(r.site == "blue" for r in records),
            "n_ambiguous": sum(r.ambiguous for r in records),
            "gamma_mhz": {"median": np.median(g), "p25": np.percentile(g, 25), "p75": np.percentile(g, 75)},
            "position_sigma_nm": {"median": np.median(s), "p25": np.percentile(s, 25), "p75": np.percentile(s, 75)},
        })
        img = render_superres(records, cfg.analysis.superres_pixel_nm)
        write_pgm(img.image, outs.path("superres.pgm"))
        summary["superres"] = {"origin_nm": img.origin, "pixel_nm": img.pixel_size, "shape": img.image.shape,
                               "integral": float(img.image.sum())}
    usable = [r for r in records if not r.ambiguous]
    if len(usable) >= 2:
        rep, hist = pl.pair_report(cfg, usable)
        _write_pairs(outs, hist)
        summary["pairs"] = rep
    return summary


def cmd_analyze(cfg: ScenarioConfig, outs: Outputs, args) -> dict:
    sample = pl.make_sample(cfg, args.threads)
    camera = pl.camera_for(cfg, sample)
    if args.stack:
        exposure = cfg.instrument.widefield.exposure_s if cfg.instrument.widefield else 0.01
        stack = read_smfs(args.stack, camera, exposure)
    else:
        stack = pl.simulate_widefield(cfg, sample, args.threads)
    run = pl.analyze_stack(stack, cfg)
    summary = {"n_frames": len(stack), "n_sweeps": len(stack.sweeps()), "n_events": len(run.events)}
    if len(run.records) >= 2:
        a, b = pl.best_pair(run)
        sep = pl.paired_separations(run, a, b)
        if sep.size >= 2:
            summary["pair_separation_nm"] = {"record_ids": [a, b], "mean": sep.mean(), "sem": sep.std(ddof=1) / math.sqrt(sep.size),
                                             "n": sep.size}
    summary = _catalog_outputs(outs, cfg, run.records, summary)
    dump_json(summary, outs.path("summary.json"))
    return {"n_records": len(run.records)}


def cmd_saturate(cfg: ScenarioConfig, outs: Outputs, args) -> dict:
    sample = pl.make_sample(cfg, args.threads)
    runs = pl.run_saturation(cfg, sample, args.threads)
    rows = []
    for r in runs:
        for k, (p, tr, f) in enumerate(zip(r.powers, r.traces, r.line_fits)):
            write_traces_csv([tr], outs.path(f"saturation_e{r.emitter_id}_p{k}.csv"))
            rows.append([r.emitter_id, float(p), f["center"], f["fwhm"], f.err("fwhm"), f["amplitude"],
                         f.err("amplitude"), f["baseline"]])
    _write_rows(outs.path("saturation_lines.csv"),
                ["emitter_id", "power_nw", "center_mhz", "fwhm_mhz", "fwhm_err_mhz", "peak_kcps", "peak_err_kcps",
                 "baseline_kcps"], rows)
    report = pl.saturation_report(cfg, sample, runs)
    dump_json({"emitters": report, "fits": [r.fit.to_dict() for r in runs]}, outs.path("saturation.json"))
    return {"ok": all(r["ok"] for r in report)}


def cmd_diffusion(cfg: ScenarioConfig, outs: Outputs, args) -> dict:
    sample = pl.make_sample(cfg, args.threads)
    runs = pl.run_diffusion(cfg, sample, args.threads)
    _write_rows(outs.path("diffusion_centers.csv"), ["emitter_id", "scan", "center_mhz", "fwhm_mhz"],
                ([r.emitter_id, k, float(c), float(w)] for r in runs for k, (c, w) in enumerate(zip(r.centers, r.widths))))
    report = pl.diffusion_report(cfg, sample, runs)
    dump_json(report, outs.path("diffusion.json"))
    return {"ok": report["ok"]}


def cmd_dipoles(cfg: ScenarioConfig, outs: Outputs, args) -> dict:
    sample = pl.make_sample(cfg, args.threads)
    run = pl.run_dipoles(cfg, sample, args.threads)
    write_catalog_csv(run.records, outs.path("catalog.csv"))
    counts, edges = np.histogram(run.dphi, bins=np.linspace(0, 90, int(round(90 / cfg.analysis.dphi_bin_deg)) + 1))
    _write_rows(outs.path("dphi_hist.csv"), ["lo_deg", "hi_deg", "count"],
                ([float(a), float(b), int(c)] for a, b, c in zip(edges[:-1], edges[1:], counts)))
    reg = register_ncs(run.records, cfg.analysis.min_per_nc)
    _write_rows(outs.path("registered.csv"), ["record_id", "nc_id", "x_nm", "y_nm", "sigma_nm", "phi_deg"],
                ([int(i), int(k), float(p[0]), float(p[1]), float(s), float(f)] for i, k, p, s, f in
                 zip(reg.record_id, reg.nc_id, reg.points, reg.sigma, reg.phi)))
    report = pl.dipole_report(cfg, sample, run)
    if run.mixture is not None:
        report["mixture_fit"] = run.mixture.to_dict()
    dump_json(report, outs.path("dipoles.json"))
    return {"ok": report.get("mixture_ok") is not False and report["phi_ok"]}


def cmd_pairs(cfg: ScenarioConfig, outs: Outputs, args) -> dict:
    if args.catalog:
        records = read_catalog_csv(args.catalog)
    else:
        records = pl.truth_catalog(cfg, pl.make_sample(cfg, args.threads))
    rep, hist = pl.pair_report(cfg, records)
    _write_pairs(outs, hist)
    dump_json(rep, outs.path("pairs.json"))
    return rep


def roundtrip_report(cfg: ScenarioConfig, threads: int = 1) -> dict:
    """Simulate, reduce and compare with ground truth for every configured measurement."""
    sample = pl.make_sample(cfg, threads)
    inst = cfg.instrument
    tol = cfg.tolerances
    criteria, details = [], {}

    def add(name, ok, measured, expected):
        criteria.append({"name": name, "pass": bool(ok), "measured": measured, "expected": expected})

    if inst.widefield is not None:
        stack = pl.simulate_widefield(cfg, sample, threads)
        run = pl.analyze_stack(stack, cfg)
        rep = pl.widefield_report(cfg, sample, stack, run)
        details["widefield"] = rep
        add("catalog_recall", rep["recall_ok"], rep["recall"], f">= {tol.recall}")
        add("position_error_nm", rep["position_ok"], rep["median_position_error_nm"], f"<= {tol.position_nm}")
    if inst.saturation is not None:
        rows = pl.saturation_report(cfg, sample, pl.run_saturation(cfg, sample, threads))
        details["saturation"] = rows
        for r in rows:
            add(f"saturation_e{r['emitter_id']}", r["ok"], r["fit"], {"truth": r["truth"], "rel_tol": tol.saturation_rel})
    if inst.confocal is not None:
        runs = pl.run_diffusion(cfg, sample, threads)
        rep = pl.diffusion_report(cfg, sample, runs)
        details["diffusion"] = rep
        add("sigma_f_median", rep["ok"], rep["cohort"]["sigma_f_median"],
            {"truth": rep["sigma_f_median_truth"], "rel_tol": tol.sigma_f_rel})
        from .photophysics import broadened_linewidth, polarization_factor

        p = inst.confocal.scan.power_nw
        devs = []
        for r in runs:
            e = sample.emitter(r.emitter_id).params
            expect = broadened_linewidth(p * polarization_factor(e.phi, inst.confocal.scan.theta_exc_deg), e)
            devs.append(abs(r.stat.gamma / expect - 1.0))
        add("linewidth", max(devs) <= tol.linewidth_rel, max(devs), f"<= {tol.linewidth_rel}")
    if inst.polarization is not None:
        run = pl.run_dipoles(cfg, sample, threads)
        rep = pl.dipole_report(cfg, sample, run)
        details["dipoles"] = rep
        add("phi_error_deg", rep["phi_ok"], rep["median_phi_error_deg"], f"<= {tol.phi_deg}")
        if rep["mixture"] is not None:
            add("mixture", rep["mixture_ok"], rep["mixture"],
                {"a": tol.mixture_a, "sigma0": tol.mixture_sigma0, "phi_prime": tol.mixture_phi_prime,
                 "sigma1": tol.mixture_sigma1})
    return {"criteria": criteria, "details": details, "pass": all(c["pass"] for c in criteria)}


def cmd_roundtrip(cfg: ScenarioConfig, outs: Outputs, args) -> dict:
    report = roundtrip_report(cfg, args.threads)
    dump_json(report, outs.path("report.json"))
    for c in report["criteria"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}: measured {_clean(c['measured'])}, "
              f"expected {_clean(c['expected'])}")
    return {"pass": report["pass"], "n_criteria": len(report["criteria"])}


COMMANDS: dict[str, Callable] = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "roundtrip": cmd_roundtrip,
    "saturate": cmd_saturate,
    "dipoles": cmd_dipoles,
    "pairs": cmd_pairs,
    "diffusion": cmd_diffusion,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smforge", description="Simulate and analyze single-molecule spectroscopy scans.")
    p.add_argument("--version", action="version", version=f"smforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="scenario JSON")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--threads", type=int, default=None, help="worker cap (default: $SMFORGE_THREADS or 1)")
        if name == "analyze":
            s.add_argument("--stack", default=None, help="SMFS stack to analyze (default: simulate from the config)")
        if name == "pairs":
            s.add_argument("--catalog", default=None, help="catalog CSV (default: ground truth with localization noise)")
    return p


def _threads(value: Optional[int]) -> int:
    if value is None:
        env = os.environ.get("SMFORGE_THREADS", "").strip()
        value = int(env) if env.isdigit() else 1
    return max(1, value)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.threads = _threads(args.threads)
    started = _now()
    try:
        cfg = load_config(args.config, seed=args.seed)
    except FileNotFoundError as exc:
        print(json.dumps({"error": "config", "errors": [{"loc": "<file>", "msg": str(exc), "type": "missing"}]}),
              file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(json.dumps({"error": "config", "errors": exc.errors}), file=sys.stderr)
        return EXIT_CONFIG
    outs = Outputs(Path(args.out))
    try:
        result = COMMANDS[args.command](cfg, outs, args)
        outs.publish(_manifest(args.command, cfg, args.threads, started, {"result": result}))
    except ConfigError as exc:
        outs.discard()
        print(json.dumps({"error": "config", "errors": exc.errors}), file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        outs.discard()
        print(json.dumps({"error": "format", "msg": str(exc)}), file=sys.stderr)
        return EXIT_FORMAT
    except (DomainError, LookupError) as exc:
        outs.discard()
        print(json.dumps({"error": "config", "errors": [{"loc": args.command, "msg": str(exc), "type": "value"}]}),
              file=sys.stderr)
        return EXIT_CONFIG
    except BaseException:
        outs.discard()
        raise
    if args.command == "roundtrip" and not result["pass"]:
        return EXIT_ACCEPTANCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
