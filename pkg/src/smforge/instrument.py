"""Measurement simulation: wide-field frame stacks and confocal traces.

Frequencies are absolute and in MHz throughout; rates are in kcps, so the
expected photon count in one step is ``rate * 1e3 * exposure``.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .config import CameraModel, ConfigError, ScanModel
from .photophysics import diffuse_centers
from .rng import Stream, as_stream
from .sample import Sample
from .units import DomainError, FormatError, thz_to_mhz, wrap_axial

SMFS_MAGIC = b"SMFS"
SMFS_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_FRAME_HEADER = struct.Struct("<dd")

# emitters below this fraction of the frame's expected total are skipped;
# the dropped mass is at most n_emitters * RENDER_FLOOR of the total
RENDER_FLOOR = 1e-10


class UndersampledWarning(UserWarning):
    pass


class Mode(str, Enum):
    WIDEFIELD = "widefield"
    CONFOCAL = "confocal"


@dataclass(frozen=True)
class ScanConfig:
    f_start: float  # MHz
    f_stop: float  # MHz
    scan_rate: float = 700.0  # MHz/s
    exposure: float = 0.01  # s per step
    repetitions: int = 1
    power: float = 0.5  # nW per molecule
    theta_exc: float = 0.0  # deg
    mode: Mode = Mode.WIDEFIELD
    background_kcps: float = 0.0
    noise: bool = True  # confocal shot noise; the camera has its own switch

    def __post_init__(self):
        if not self.f_stop > self.f_start:
            raise DomainError("f_stop must exceed f_start")
        if not self.scan_rate > 0 or not self.exposure > 0:
            raise DomainError("scan_rate and exposure must be > 0")
        if self.repetitions < 1:
            raise DomainError("repetitions must be >= 1")
        if self.power < 0 or self.background_kcps < 0:
            raise DomainError("power and background must be >= 0")
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def step(self) -> float:
        return self.scan_rate * self.exposure

    def freq_axis(self) -> np.ndarray:
        n = int(math.floor((self.f_stop - self.f_start) / self.step + 1e-9)) + 1
        return self.f_start + self.step * np.arange(n)

    def with_(self, **changes) -> ScanConfig:
        return replace(self, **changes)

    @classmethod
    def from_model(cls, m: ScanModel, mode=Mode.WIDEFIELD, center_mhz: Optional[float] = None) -> ScanConfig:
        """Absolute range when given, else ``span_mhz`` around ``center_mhz``."""
        if m.f_start_thz is not None and m.f_stop_thz is not None:
            lo, hi = thz_to_mhz(m.f_start_thz), thz_to_mhz(m.f_stop_thz)
        else:
            if center_mhz is None:
                raise ConfigError([{"loc": "scan.span_mhz", "msg": "a relative scan needs a target emitter", "type": "value"}])
            lo, hi = center_mhz - 0.5 * m.span_mhz, center_mhz + 0.5 * m.span_mhz
        return cls(lo, hi, m.scan_rate_mhz_s, m.exposure_s, m.repetitions, m.power_nw, m.theta_exc_deg,
                   Mode(mode), m.background_kcps, m.noise)


@dataclass(frozen=True)
class CameraConfig:
    pixel_size: float = 100.0  # nm
    width: int = 128
    height: int = 128
    psf_sigma: float = 130.0  # nm
    background: float = 2.0  # counts / pixel / frame
    drift_velocity: tuple[float, float] = (20.0, 0.0)  # nm / hour
    drift_rw_sigma: float = 0.5  # nm / sqrt(frame)
    origin: tuple[float, float] = (0.0, 0.0)  # nm, outer corner of pixel (0, 0)
    noise: bool = True
    clip_max: Optional[int] = None

    def __post_init__(self):
        if not self.pixel_size > 0 or not self.psf_sigma > 0:
            raise DomainError("pixel_size and psf_sigma must be > 0")
        if self.background < 0 or self.drift_rw_sigma < 0:
            raise DomainError("background and drift_rw_sigma must be >= 0")
        if self.width < 1 or self.height < 1:
            raise DomainError("camera must have at least one pixel")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def from_model(cls, m: CameraModel, sample: Optional[Sample] = None) -> CameraConfig:
        origin = m.origin_nm
        if origin is None:
            if sample is not None:
                x0, y0, x1, y1 = sample.bbox
                cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            else:
                cx = cy = 0.0
            origin = (cx - 0.5 * m.width * m.pixel_size_nm, cy - 0.5 * m.height * m.pixel_size_nm)
        return cls(m.pixel_size_nm, m.width, m.height, m.psf_sigma_nm, m.background,
                   tuple(m.drift_velocity_nm_per_hour), m.drift_rw_sigma_nm, tuple(origin), m.noise, m.clip_max)


@dataclass
class FrameStack:
    frames: np.ndarray  # uint32 [frame, row, col]
    freq_axis: np.ndarray  # MHz per frame
    theta_axis: np.ndarray  # deg per frame
    camera: CameraConfig = field(default_factory=CameraConfig)
    exposure: float = 0.01
    drift: Optional[np.ndarray] = field(default=None, repr=False)  # true offset per frame (nm), when simulated

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3:
            raise DomainError("frames must be a 3D array")
        n = self.frames.shape[0]
        self.freq_axis = np.asarray(self.freq_axis, dtype=float)
        self.theta_axis = np.asarray(self.theta_axis, dtype=float)
        if self.freq_axis.shape != (n,) or self.theta_axis.shape != (n,):
            raise DomainError("axis lengths must equal the frame count")
        if self.frames.dtype != np.uint32:
            if np.any(self.frames < 0):
                raise DomainError("counts must be non-negative")
            self.frames = self.frames.astype(np.uint32)

    def __len__(self):
        return self.frames.shape[0]

    def sweeps(self) -> list[slice]:
        """Frame ranges of the individual frequency sweeps (split where frequency drops)."""
        n = len(self)
        if n == 0:
            return []
        cuts = np.flatnonzero(np.diff(self.freq_axis) < 0) + 1
        edges = [0, *cuts.tolist(), n]
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


@dataclass
class ScanTrace:
    freq: np.ndarray  # MHz
    rate: np.ndarray  # kcps
    rep_index: int = 0
    exposure_s: float = 0.01  # per point; repetitions * exposure for an averaged trace

    def __post_init__(self):
        self.freq = np.asarray(self.freq, dtype=float)
        self.rate = np.asarray(self.rate, dtype=float)
        if self.freq.shape != self.rate.shape or self.freq.ndim != 1:
            raise DomainError("freq and rate must be 1D and of equal length")
        if self.freq.size > 1 and np.any(np.diff(self.freq) <= 0):
            raise DomainError("freq must be strictly increasing")
        if np.any(self.rate < 0):
            raise DomainError("rates must be non-negative")


# line parameters, vectorized over emitters

def _line_arrays(arr: dict, power: float, theta_exc: float):
    """Peak rate (kcps) and squared half width (MHz^2) per emitter."""
    d = np.deg2rad(wrap_axial(arr["phi"] - theta_exc))
    p_eff = power * 0.5 * (1.0 + np.cos(2.0 * d))
    peak = arr["f_inf"] * p_eff / (p_eff + arr["p_sat"])
    gamma = arr["gamma0"] * np.sqrt((p_eff + arr["p_sat"]) / arr["p_sat"])
    return peak, 0.25 * gamma * gamma


def _rates(freq: float, centers, peak, hw2):
    df = freq - centers
    return peak * hw2 / (df * df + hw2)


def render_expected(xs, ys, counts, camera: CameraConfig, drift_offset=(0.0, 0.0)) -> np.ndarray:
    """Expected image: background plus pixel-integrated Gaussian spots."""
    img = np.full(camera.shape, float(camera.background))
    counts = np.asarray(counts, dtype=float)
    total = float(counts.sum()) + float(camera.background) * img.size
    keep = counts > RENDER_FLOOR * total
    if np.any(keep):
        _kernels.accumulate_psf(
            img,
            np.asarray(xs)[keep] + drift_offset[0],
            np.asarray(ys)[keep] + drift_offset[1],
            counts[keep],
            camera.psf_sigma,
            camera.origin[0],
            camera.origin[1],
            camera.pixel_size,
        )
    return img


def _observe(expected: np.ndarray, camera: CameraConfig, stream: Stream) -> np.ndarray:
    if camera.noise:
        out = stream.generator().poisson(expected)
    else:
        out = np.rint(expected)
    if camera.clip_max is not None:
        out = np.minimum(out, camera.clip_max)
    return out.astype(np.uint32)


def render_frame(sample: Sample, f_laser: float, theta_exc: float, power: float, camera: CameraConfig,
                 drift_offset=(0.0, 0.0), rng=0, exposure: float = 0.01, centers=None) -> np.ndarray:
    """One camera frame at laser frequency ``f_laser`` (MHz).

    ``centers`` overrides the emitters' resonance frequencies (default f0).
    With ``camera.noise`` off the expected image is rounded to counts; use
    ``render_expected`` for the exact expectation.
    """
    arr = sample.arrays
    peak, hw2 = _line_arrays(arr, power, theta_exc)
    c = arr["f0"] if centers is None else np.asarray(centers, dtype=float)
    counts = _rates(f_laser, c, peak, hw2) * 1e3 * exposure
    expected = render_expected(arr["x"], arr["y"], counts, camera, drift_offset)
    return _observe(expected, camera, as_stream(rng, "frame"))


def drift_path(camera: CameraConfig, n_frames: int, exposure: float, rng) -> np.ndarray:
    """Sample-to-camera offset per frame (nm): linear drift plus a random walk starting at zero."""
    t_hours = np.arange(n_frames) * exposure / 3600.0
    lin = np.outer(t_hours, camera.drift_velocity)
    walk = np.zeros((n_frames, 2))
    if n_frames > 1 and camera.drift_rw_sigma > 0:
        steps = as_stream(rng, "drift").generator().standard_normal((n_frames - 1, 2)) * camera.drift_rw_sigma
        walk[1:] = np.cumsum(steps, axis=0)
    return lin + walk


def scan_centers(sample: Sample, repetitions: int, rng) -> np.ndarray:
    """Resonance centers per emitter and repetition, shape (n_emitters, repetitions)."""
    root = as_stream(rng)
    arr = sample.arrays
    out = np.repeat(arr["f0"][:, None], repetitions, axis=1)
    for i, e in enumerate(sample.emitters):
        if e.params.sigma_f > 0 or e.params.jump_rate > 0:
            out[i] = diffuse_centers(e.params, repetitions, root.child("diffusion", e.id))
    return out


def _threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("SMFORGE_THREADS", "1") or 1)
    return max(1, int(threads))


def simulate_widefield_scan(sample: Sample, scan: ScanConfig, camera: CameraConfig, rng=0,
                            threads: Optional[int] = None,
                            lock_mask: Optional[Callable[[int], bool]] = None) -> FrameStack:
    """Frame stack over ``scan.repetitions`` sweeps of the laser.

    Frame ``t`` draws its shot noise from stream ``("frame", t)`` so the
    result does not depend on ``threads``. ``lock_mask(t)`` returning True
    blanks the laser for that frame (background only).
    """
    if scan.mode is not Mode.WIDEFIELD:
        raise DomainError("simulate_widefield_scan needs a wide-field scan")
    root = as_stream(rng)
    arr = sample.arrays
    if arr["gamma0"].size and scan.step > arr["gamma0"].min() / 4.0:
        warnings.warn(f"frequency step {scan.step:g} MHz exceeds min(gamma0)/4; lines are undersampled",
                      UndersampledWarning, stacklevel=2)
    axis = scan.freq_axis()
    n = axis.size
    total = n * scan.repetitions
    drift = drift_path(camera, total, scan.exposure, root.child("drift"))
    centers = scan_centers(sample, scan.repetitions, root)
    peak, hw2 = _line_arrays(arr, scan.power, scan.theta_exc)
    frames = np.empty((total, camera.height, camera.width), dtype=np.uint32)
    scale = 1e3 * scan.exposure

    def one(t):
        rep, k = divmod(t, n)
        if lock_mask is not None and lock_mask(t):
            counts = np.zeros_like(peak)
        else:
            counts = _rates(axis[k], centers[:, rep], peak, hw2) * scale
        expected = render_expected(arr["x"], arr["y"], counts, camera, drift[t])
        frames[t] = _observe(expected, camera, root.child("frame", t))

    workers = _threads(threads)
    if workers == 1:
        for t in range(total):
            one(t)
    else:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(one, range(total)))
    return FrameStack(frames, np.tile(axis, scan.repetitions), np.full(total, float(scan.theta_exc)), camera,
                      scan.exposure, drift)


def simulate_confocal_trace(sample: Sample, emitter_id: int, scan: ScanConfig, rng=0,
                            threads: Optional[int] = None) -> list[ScanTrace]:
    """One trace per repetition; the center is redrawn per repetition."""
    e = sample.emitter(emitter_id)
    root = as_stream(rng)
    axis = scan.freq_axis()
    if e.params.sigma_f > 0 or e.params.jump_rate > 0:
        centers = diffuse_centers(e.params, scan.repetitions, root.child("diffusion", e.id))
    else:
        centers = np.full(scan.repetitions, e.params.f0)
    arr = {k: np.array([v]) for k, v in
           (("phi", e.params.phi), ("f_inf", e.params.f_inf), ("p_sat", e.params.p_sat), ("gamma0", e.params.gamma0))}
    peak, hw2 = _line_arrays(arr, scan.power, scan.theta_exc)
    scale = 1e3 * scan.exposure

    def one(r):
        mu = (_rates(axis, centers[r], peak[0], hw2[0]) + scan.background_kcps) * scale
        counts = root.child("confocal", e.id, r).generator().poisson(mu) if scan.noise else mu
        return ScanTrace(axis.copy(), counts / scale, r, scan.exposure)

    workers = _threads(threads)
    if workers == 1:
        return [one(r) for r in range(scan.repetitions)]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(one, range(scan.repetitions)))


def average_traces(traces: Sequence[ScanTrace]) -> ScanTrace:
    if not traces:
        raise DomainError("no traces to average")
    rate = np.mean([t.rate for t in traces], axis=0)
    return ScanTrace(traces[0].freq.copy(), rate, 0, sum(t.exposure_s for t in traces))


def simulate_saturation_series(sample: Sample, emitter_id: int, powers: Sequence[float], scan: ScanConfig,
                               rng=0, threads: Optional[int] = None) -> list[tuple[float, ScanTrace]]:
    """One repetition-averaged trace per power."""
    if len(powers) == 0 or any(p < 0 for p in powers):
        raise DomainError("powers must be non-empty and >= 0")
    sample.emitter(emitter_id)
    root = as_stream(rng)
    out = []
    for i, p in enumerate(powers):
        traces = simulate_confocal_trace(sample, emitter_id, scan.with_(power=float(p)),
                                         root.child("saturation", i), threads)
        out.append((float(p), average_traces(traces)))
    return out


def simulate_polarization_series(sample: Sample, angles: Sequence[float], scan: ScanConfig, camera: CameraConfig,
                                 rng=0, threads: Optional[int] = None) -> list[FrameStack]:
    """One wide-field stack per excitation angle; repeated angles are allowed."""
    if len({round(float(wrap_axial(a)), 9) for a in angles}) < 2:
        raise ConfigError([{"loc": "angles", "msg": "need at least 2 distinct polarization angles", "type": "value"}])
    root = as_stream(rng)
    return [
        simulate_widefield_scan(sample, scan.with_(theta_exc=float(a)), camera, root.child("polarization", i), threads)
        for i, a in enumerate(angles)
    ]


# SMFS frame stacks

def write_smfs(stack: FrameStack, path) -> None:
    n, h, w = stack.frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SMFS_MAGIC, SMFS_VERSION, w, h, n))
        for i in range(n):
            fh.write(_FRAME_HEADER.pack(float(stack.freq_axis[i]), float(stack.theta_axis[i])))
            fh.write(np.ascontiguousarray(stack.frames[i], dtype="<u4").tobytes())


def read_smfs(path, camera: Optional[CameraConfig] = None, exposure: float = 0.01) -> FrameStack:
    """Parse an SMFS file; ``camera`` supplies the optics the format does not store."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated header: {len(data)} bytes at offset 0")
    magic, version, w, h, n = _HEADER.unpack_from(data, 0)
    if magic != SMFS_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != SMFS_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if w == 0 or h == 0:
        raise FormatError("zero-sized frames at offset 8")
    frame_bytes = _FRAME_HEADER.size + 4 * w * h
    expect = _HEADER.size + n * frame_bytes
    if len(data) != expect:
        off = _HEADER.size + min(n, (len(data) - _HEADER.size) // frame_bytes) * frame_bytes
        raise FormatError(f"size mismatch: expected {expect} bytes for {n} frames, got {len(data)} (offset {off})")
    freq = np.empty(n)
    theta = np.empty(n)
    frames = np.empty((n, h, w), dtype=np.uint32)
    off = _HEADER.size
    for i in range(n):
        freq[i], theta[i] = _FRAME_HEADER.unpack_from(data, off)
        off += _FRAME_HEADER.size
        frames[i] = np.frombuffer(data, dtype="<u4", count=w * h, offset=off).reshape(h, w)
        off += 4 * w * h
    if camera is None:
        camera = CameraConfig(width=w, height=h)
    elif (camera.width, camera.height) != (w, h):
        raise FormatError(f"file frames are {w}x{h}, camera is {camera.width}x{camera.height}")
    return FrameStack(frames, freq, theta, camera, exposure)


# scan traces as CSV

TRACE_HEADER = ["freq_mhz", "rate_kcps", "rep"]


def write_traces_csv(traces: Sequence[ScanTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for t in traces:
            for f, r in zip(t.freq, t.rate):
                w.writerow([repr(float(f)), repr(float(r)), t.rep_index])


def read_traces_csv(path, exposure_s: float = 0.01) -> list[ScanTrace]:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != TRACE_HEADER:
        raise FormatError(f"expected header {','.join(TRACE_HEADER)} at line 1")
    groups: dict[int, tuple[list, list]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            f, r, rep = float(row[0]), float(row[1]), int(row[2])
        except (ValueError, IndexError):
            raise FormatError(f"malformed row at line {lineno}: {row!r}") from None
        g = groups.setdefault(rep, ([], []))
        g[0].append(f)
        g[1].append(r)
    try:
        return [ScanTrace(np.array(f), np.array(r), rep, exposure_s) for rep, (f, r) in groups.items()]
    except DomainError as exc:
        raise FormatError(str(exc)) from None
