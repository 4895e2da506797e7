"""From frame stacks to a molecule catalog.

Each frequency sweep is searched for spots with a matched filter; spots in
consecutive frames at the same place form an event (one line crossing).
Every event is localized on its summed frames and gets a line fit from
aperture photometry. Events of the same molecule across sweeps are merged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.signal import find_peaks, peak_widths

from .. import _kernels
from ..fitting import fit_gaussian2d, fit_lorentzian
from ..instrument import FrameStack
from ..units import DomainError
from .records import SITE_THRESHOLD_THZ, MoleculeRecord, site_label


# two molecules closer than this many PSF sigmas share one diffraction spot
SPOT_RADIUS_SIGMAS = 3.0


@dataclass(frozen=True)
class PeakCandidate:
    index: int
    freq: float  # MHz
    height: float
    prominence: float
    lo: int  # fit window, inclusive
    hi: int  # fit window, exclusive


def robust_noise(y) -> float:
    """Noise level from the median absolute first difference."""
    y = np.asarray(y, dtype=float)
    if y.size < 3:
        return 0.0
    return float(1.4826 * np.median(np.abs(np.diff(y))) / math.sqrt(2.0))


def detect_peaks(spectrum, min_prominence: Optional[float] = None, min_separation_mhz: float = 0.0,
                 window_widths: float = 4.0, counts_per_unit: Optional[float] = None,
                 shot_noise_sigmas: float = 5.0) -> list[PeakCandidate]:
    """Local maxima of a trace that stand out by ``min_prominence``.

    The default threshold is five times the robust noise level. With
    ``counts_per_unit`` set the trace is taken as Poisson data and each peak
    must also rise ``shot_noise_sigmas`` times its own shot noise above its
    base, which rejects noise spikes on the flanks of bright lines. Each
    candidate carries a fit window of ``window_widths`` half-prominence widths
    on either side.
    """
    f = np.asarray(spectrum.freq, dtype=float)
    y = np.asarray(spectrum.rate, dtype=float)
    if f.size == 0:
        raise DomainError("spectrum is empty")
    if f.size < 3:
        return []
    if min_prominence is None:
        scale = float(np.max(np.abs(y)))
        min_prominence = max(5.0 * robust_noise(y), 1e-9 * scale, 1e-300)
    step = float(np.median(np.diff(f)))
    distance = max(1, int(round(min_separation_mhz / step))) if min_separation_mhz > 0 and step > 0 else None
    idx, props = find_peaks(y, prominence=min_prominence, distance=distance)
    if counts_per_unit is not None and idx.size:
        c = float(counts_per_unit)
        shot = shot_noise_sigmas * np.sqrt(np.maximum(y[idx] * c, 1.0)) / c
        keep = props["prominences"] >= shot
        # neighbours need a significant dip between them, else the lower one goes
        changed = True
        while changed:
            changed = False
            live = np.flatnonzero(keep)
            for a, b in zip(live[:-1], live[1:]):
                lo = min(y[idx[a]], y[idx[b]])
                dip = lo - float(y[idx[a]:idx[b] + 1].min())
                if dip < shot_noise_sigmas * math.sqrt(max(lo * c, 1.0)) / c:
                    keep[a if y[idx[a]] < y[idx[b]] else b] = False
                    changed = True
                    break
        idx = idx[keep]
        props = {k: v[keep] for k, v in props.items()}
    if idx.size == 0:
        return []
    widths = peak_widths(y, idx, rel_height=0.5, prominence_data=(props["prominences"], props["left_bases"],
                                                                   props["right_bases"]))[0]
    out = []
    for i, k in enumerate(idx):
        half = max(4, int(math.ceil(window_widths * widths[i])))
        out.append(PeakCandidate(int(k), float(f[k]), float(y[k]), float(props["prominences"][i]),
                                 max(0, int(k) - half), min(f.size, int(k) + half + 1)))
    return out


@dataclass
class CatalogOptions:
    psf_sigma: float = 130.0  # nm, sets the matched filter
    detection_snr: float = 5.0
    link_radius_px: float = 1.5
    roi_half_px: int = 5
    frame_smooth: int = 3  # frames summed for detection
    max_gap: int = 1  # missed frames tolerated inside an event
    min_frames: int = 4  # one more than frame_smooth, so a single noisy frame cannot form an event
    border_px: int = 2  # detections this close to the frame edge are ignored
    merge_gate_sigma: float = 3.0
    min_merge_nm: float = 30.0
    gamma_gate: float = 3.0
    site_threshold_thz: float = SITE_THRESHOLD_THZ
    weighting: str = "mle"
    drift_detrend: bool = False
    background_floor: float = 0.5  # counts, keeps the SNR finite on dark pixels

    @classmethod
    def from_config(cls, analysis, psf_sigma: float) -> CatalogOptions:
        return cls(
            psf_sigma=psf_sigma,
            detection_snr=analysis.detection_snr,
            link_radius_px=analysis.link_radius_px,
            roi_half_px=analysis.roi_half_px,
            merge_gate_sigma=analysis.merge_gate_sigma,
            min_merge_nm=analysis.min_merge_nm,
            gamma_gate=analysis.match_gamma_factor,
            site_threshold_thz=analysis.site_threshold_thz,
            weighting="mle" if analysis.weighting == "poisson" else "none",
            drift_detrend=analysis.drift_detrend,
        )


@dataclass
class Event:
    sweep: int
    first: int  # absolute frame indices, inclusive
    last: int
    x: float
    y: float
    sigma: float  # nm, from the fit covariance
    photons: float
    f0: float  # MHz
    gamma: float  # MHz
    t: float  # mid frame index
    flags: tuple[str, ...] = ()


def _filter_k2(s_px: float) -> float:
    n = int(math.ceil(5 * s_px)) * 2 + 1
    d = np.zeros((n, n))
    d[n // 2, n // 2] = 1.0
    k = ndimage.gaussian_filter(d, s_px, mode="constant")
    return float(np.sum(k * k))


def _tracks(det_t, det_r, det_c, det_snr, opts: CatalogOptions):
    """Greedy frame-to-frame linking; returns lists of detection indices."""
    tracks: list[list[int]] = []
    active: list[int] = []
    order = np.lexsort((-det_snr, det_t))
    for k in order:
        t = det_t[k]
        still = []
        for ti in active:
            if t - det_t[tracks[ti][-1]] <= opts.max_gap + 1:
                still.append(ti)
        active = still
        best, bd = None, opts.link_radius_px
        for ti in active:
            last = tracks[ti][-1]
            if det_t[last] == t:
                continue
            d = math.hypot(det_r[last] - det_r[k], det_c[last] - det_c[k])
            if d <= bd:
                best, bd = ti, d
        if best is None:
            tracks.append([k])
            active.append(len(tracks) - 1)
        else:
            tracks[best].append(k)
    return tracks


def _window(center: int, half: int, size: int) -> tuple[int, int]:
    lo = min(max(center - half, 0), max(size - (2 * half + 1), 0))
    return lo, min(lo + 2 * half + 1, size)


def _spectrum(raw, r: int, c: int, ap: int, a0: int, a1: int) -> np.ndarray:
    H, W = raw.shape[1:]
    r = min(max(r, 0), H - 1)
    c = min(max(c, 0), W - 1)
    return raw[a0:a1, max(r - ap, 0):r + ap + 1, max(c - ap, 0):c + ap + 1].sum(axis=(1, 2)).astype(float)


def _line_candidates(spec: np.ndarray) -> list[PeakCandidate]:
    idx = np.arange(spec.size, dtype=float)
    return detect_peaks(_Spec(idx, spec), min_prominence=5.0 * math.sqrt(max(float(np.median(spec)), 1.0)))


def _extent(t0: int, t1: int, m: int) -> tuple[int, int]:
    ext = max(8, 2 * (t1 - t0 + 1))
    return max(0, t0 - ext), min(m, t1 + ext + 1)


def _split_track(raw, tr, det_t, det_r, det_c, det_snr, ap, opts) -> list[np.ndarray]:
    """Split a track whose aperture spectrum peaks more than once inside it.

    Neighbouring molecules with nearby lines can be linked into one track;
    the cut goes at the spectral minimum between consecutive peaks.
    """
    t0, t1 = int(det_t[tr].min()), int(det_t[tr].max())
    best = tr[np.argmax(det_snr[tr])]
    a0, a1 = _extent(t0, t1, raw.shape[0])
    spec = _spectrum(raw, int(det_r[best]), int(det_c[best]), ap, a0, a1)
    inside = sorted(a0 + c.index for c in _line_candidates(spec) if t0 <= a0 + c.index <= t1)
    if len(inside) < 2:
        return [tr]
    cuts = [inside[i] + int(np.argmin(spec[inside[i] - a0:inside[i + 1] - a0 + 1]))
            for i in range(len(inside) - 1)]
    bounds = [t0] + cuts + [t1 + 1]
    segs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        seg = tr[(det_t[tr] >= lo) & (det_t[tr] < hi)]
        if seg.size >= max(2, opts.min_frames - 1):
            segs.append(seg)
    return segs


def _fit_event(stack, sw, si, raw, tr, det_t, det_r, det_c, det_snr, ap, opts) -> Optional[Event]:
    cam = stack.camera
    m, H, W = raw.shape
    half = opts.roi_half_px
    best = tr[np.argmax(det_snr[tr])]
    r, c = int(det_r[best]), int(det_c[best])
    t0, t1 = int(det_t[tr].min()), int(det_t[tr].max())
    r0, r1 = _window(r, half, H)
    c0, c1 = _window(c, half, W)
    roi = raw[t0:t1 + 1, r0:r1, c0:c1].sum(axis=0)
    origin = (cam.origin[0] + c0 * cam.pixel_size, cam.origin[1] + r0 * cam.pixel_size)
    fit = fit_gaussian2d(roi, cam.pixel_size, origin, weighting=opts.weighting)
    if not fit.converged:
        return None
    flags = []
    x, y = fit["x0"], fit["y0"]
    sig = 0.5 * (fit.err("x0") + fit.err("y0"))
    # aperture photometry across the line, with room for the wings
    a0, a1 = _extent(t0, t1, m)
    pr = int(round((y - cam.origin[1]) / cam.pixel_size - 0.5))
    pc = int(round((x - cam.origin[0]) / cam.pixel_size - 0.5))
    spec = _spectrum(raw, pr, pc, ap, a0, a1)
    freq = stack.freq_axis[sw][a0:a1]
    if freq.size < 8:
        return None
    lo, hi, own = 0, spec.size, -1
    cands = _line_candidates(spec)
    if len(cands) > 1:
        flags.append("multi_line")
        # keep the fit between the valleys that separate this line from its neighbours
        pk = sorted(cc.index for cc in cands)
        own = min(pk, key=lambda k: abs(k - (int(det_t[best]) - a0)))
        i = pk.index(own)
        if i > 0:
            lo = pk[i - 1] + int(np.argmin(spec[pk[i - 1]:own + 1]))
        if i < len(pk) - 1:
            hi = own + int(np.argmin(spec[own:pk[i + 1] + 1])) + 1
        if hi - lo < 8:
            lo, hi = 0, spec.size
    lf = fit_lorentzian(freq=freq[lo:hi], rate=spec[lo:hi], weighting="poisson")
    f0, gamma = lf["center"], lf["fwhm"]
    if len(cands) > 1 and any(abs(freq[cc.index] - f0) < 2.0 * gamma and cc.prominence >= 0.25 * lf["amplitude"]
                              for cc in cands if cc.index != own):
        flags.append("blended")
    if "weak_amplitude" in lf.flags:
        flags.append("weak_line")
    if not (math.isfinite(f0) and math.isfinite(sig) and sig > 0 and gamma > 0):
        return None
    return Event(si, sw.start + t0, sw.start + t1, x, y, sig, fit["amplitude"], f0, gamma,
                 sw.start + 0.5 * (t0 + t1), tuple(flags))


def localize_events(stack: FrameStack, options: Optional[CatalogOptions] = None) -> list[Event]:
    """Detect, link and fit line crossings in every sweep of ``stack``."""
    opts = options or CatalogOptions(psf_sigma=stack.camera.psf_sigma)
    cam = stack.camera
    n, H, W = stack.frames.shape
    if n == 0:
        return []
    if min(H, W) < 7:
        raise DomainError("frames must be at least 7x7 pixels")
    s_px = opts.psf_sigma / cam.pixel_size
    k2 = _filter_k2(s_px)
    bg = np.median(stack.frames, axis=0).astype(float)
    bg_s = ndimage.gaussian_filter(np.maximum(bg, opts.background_floor), s_px, mode="nearest")
    noise = np.sqrt(bg_s * k2 / opts.frame_smooth)
    ap = max(1, int(math.ceil(1.5 * s_px)))
    events = []
    for si, sw in enumerate(stack.sweeps()):
        raw = stack.frames[sw]
        sub = raw.astype(float) - bg
        sm = ndimage.gaussian_filter(sub, (0, s_px, s_px), mode="nearest")
        if opts.frame_smooth > 1:
            sm = ndimage.uniform_filter1d(sm, opts.frame_smooth, axis=0, mode="constant")
        snr = sm / noise
        peaks = (ndimage.maximum_filter(sm, size=(1, 3, 3), mode="nearest") == sm) & (snr >= opts.detection_snr)
        b = opts.border_px
        if b > 0:
            peaks[:, :b, :] = peaks[:, -b:, :] = False
            peaks[:, :, :b] = peaks[:, :, -b:] = False
        det_t, det_r, det_c = np.nonzero(peaks)
        if det_t.size == 0:
            continue
        det_snr = snr[det_t, det_r, det_c]
        for tr in _tracks(det_t, det_r, det_c, det_snr, opts):
            if len(tr) < opts.min_frames:
                continue
            tr = np.asarray(tr)
            for seg in _split_track(raw, tr, det_t, det_r, det_c, det_snr, ap, opts):
                ev = _fit_event(stack, sw, si, raw, seg, det_t, det_r, det_c, det_snr, ap, opts)
                if ev is not None:
                    events.append(ev)
    return events


@dataclass
class _Spec:
    freq: np.ndarray
    rate: np.ndarray


class _DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _spread(values, times, detrend: bool) -> float:
    v = np.asarray(values, dtype=float)
    if detrend and v.size >= 3 and np.ptp(times) > 0:
        coef = np.polyfit(times, v, 1)
        return float(np.sqrt(np.sum((v - np.polyval(coef, times)) ** 2) / (v.size - 2)))
    return float(np.std(v, ddof=1))


def merge_events(events: Sequence[Event], options: Optional[CatalogOptions] = None):
    """Group events of one molecule; returns ``(records, groups)``.

    Two events join when their line centers differ by at most ``gamma_gate``
    linewidths and their positions by at most ``merge_gate_sigma`` combined
    sigmas (never less than ``min_merge_nm``). ``groups[i]`` lists the event
    indices behind record ``i``.
    """
    opts = options or CatalogOptions()
    n = len(events)
    if n == 0:
        return [], []
    f = np.array([e.f0 for e in events])
    g = np.array([e.gamma for e in events])
    xy = np.array([(e.x, e.y) for e in events])
    s = np.array([e.sigma for e in events])
    ds = _DisjointSet(n)
    order = np.argsort(f, kind="stable")
    reach = opts.gamma_gate * float(g.max())
    for a_pos, a in enumerate(order):
        for b in order[a_pos + 1:]:
            if f[b] - f[a] > reach:
                break
            if abs(f[b] - f[a]) > opts.gamma_gate * max(g[a], g[b]):
                continue
            gate = max(opts.merge_gate_sigma * math.hypot(s[a], s[b]), opts.min_merge_nm)
            if math.hypot(*(xy[a] - xy[b])) <= gate:
                ds.union(int(a), int(b))
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(ds.find(i), []).append(i)
    raw = []
    for members in groups.values():
        members = sorted(members, key=lambda i: (events[i].sweep, events[i].first))
        pts = xy[members]
        t = np.array([events[i].t for i in members])
        if len(members) >= 2:
            sig = math.sqrt(0.5 * (_spread(pts[:, 0], t, opts.drift_detrend) ** 2
                                   + _spread(pts[:, 1], t, opts.drift_detrend) ** 2))
        else:
            sig = float(s[members[0]])
        sig = max(sig, 1e-6)
        flags = {fl for i in members for fl in events[i].flags}
        # one noisy crossing should not condemn a molecule seen in many sweeps
        if 2 * sum("blended" in events[i].flags for i in members) <= len(members) and len(members) > 1:
            flags.discard("blended")
        flags = sorted(flags)
        f0 = float(np.mean(f[members]))
        raw.append((f0, float(pts[:, 0].mean()), float(pts[:, 1].mean()), sig, float(np.median(g[members])),
                    tuple(flags), members, tuple(float(f[i]) for i in members)))
    raw.sort(key=lambda r: (r[0], r[1], r[2]))
    records, out_groups = [], []
    for k, (f0, x, y, sig, gam, flags, members, centers) in enumerate(raw):
        records.append(MoleculeRecord(k, x, y, sig, f0, gam, flags=flags, n_loc=len(members), centers=centers,
                                      site=site_label(f0, opts.site_threshold_thz)))
        out_groups.append(members)
    return flag_ambiguous(records, opts.psf_sigma), out_groups


def flag_ambiguous(records: Sequence[MoleculeRecord], psf_sigma: float) -> list[MoleculeRecord]:
    """Flag molecules whose lines overlap another molecule inside one diffraction spot.

    Records built from a blended spectrum (a second line within two
    linewidths in the same aperture) are flagged as well.
    """
    out = list(records)
    bad = {i for i, r in enumerate(out) if "blended" in r.flags}
    if len(out) >= 2:
        ii, jj, _ = _kernels.pairs_within([r.x for r in out], [r.y for r in out], SPOT_RADIUS_SIGMAS * psf_sigma)
        for i, j in zip(ii.tolist(), jj.tolist()):
            if abs(out[i].f0 - out[j].f0) < out[i].gamma + out[j].gamma:
                bad.update((i, j))
    for i in bad:
        if not out[i].ambiguous:
            out[i] = out[i].with_(flags=tuple(sorted(out[i].flags + ("ambiguous",))))
    return out


def build_catalog(stack: FrameStack, options: Optional[CatalogOptions] = None) -> list[MoleculeRecord]:
    """Molecule catalog from a wide-field frame stack (empty stack gives an empty catalog)."""
    opts = options or CatalogOptions(psf_sigma=stack.camera.psf_sigma)
    records, _ = merge_events(localize_events(stack, opts), opts)
    return records
