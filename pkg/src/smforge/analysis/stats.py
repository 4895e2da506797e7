"""Catalog statistics: pair distances and detunings, spectral diffusion, rendering."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import _kernels
from ..units import MHZ_PER_GHZ, DomainError, FormatError
from .records import MoleculeRecord, record_arrays


@dataclass(frozen=True)
class PairStat:
    id_a: int
    id_b: int
    distance: float  # nm
    detuning: float  # GHz, absolute

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise DomainError("a pair needs two distinct molecules")
        if not self.distance >= 0:
            raise DomainError("distance must be >= 0")


@dataclass
class PairTable:
    """All pairs within the separation cutoff, as columns (ids with id_a < id_b)."""

    id_a: np.ndarray
    id_b: np.ndarray
    distance: np.ndarray
    detuning: np.ndarray

    def __len__(self):
        return self.id_a.size

    def __iter__(self):
        for a, b, r, d in zip(self.id_a, self.id_b, self.distance, self.detuning):
            yield PairStat(int(a), int(b), float(r), float(d))


@dataclass
class PairHistograms:
    pairs: PairTable
    counts: np.ndarray  # [r bin, detuning bin]
    corrected: np.ndarray  # counts / (2 pi r_center dr), per nm^2
    r_edges: np.ndarray
    df_edges: np.ndarray

    @property
    def r_centers(self) -> np.ndarray:
        return 0.5 * (self.r_edges[:-1] + self.r_edges[1:])


def _usable(records: Sequence[MoleculeRecord]) -> list[MoleculeRecord]:
    return [r for r in records if not r.ambiguous]


def pair_table(records: Sequence[MoleculeRecord], max_sep_nm: float = 150.0) -> PairTable:
    recs = _usable(records)
    a = record_arrays(recs)
    i, j, d = _kernels.pairs_within(a["x"], a["y"], max_sep_nm)
    ia, ib = a["id"][i], a["id"][j]
    swap = ia > ib
    ia, ib = np.where(swap, ib, ia), np.where(swap, ia, ib)
    df = np.abs(a["f0"][i] - a["f0"][j]) / MHZ_PER_GHZ
    order = np.lexsort((ib, ia))
    return PairTable(ia[order], ib[order], d[order], df[order])


def pair_statistics(records: Sequence[MoleculeRecord], max_sep_nm: float = 150.0, r_bin_nm: float = 5.0,
                    df_bin_ghz: float = 1.0, df_max_ghz: Optional[float] = None) -> PairHistograms:
    """Pairs within ``max_sep_nm`` and their (distance, |detuning|) histograms.

    The corrected histogram divides each distance bin by its annulus area
    ``2 pi r dr`` (bin center ``r``), removing the geometric growth of the
    number of neighbours with distance. Ambiguous records are left out.
    """
    if max_sep_nm <= 0 or r_bin_nm <= 0 or df_bin_ghz <= 0:
        raise DomainError("separation and bin widths must be > 0")
    pairs = pair_table(records, max_sep_nm)
    nr = max(1, int(math.ceil(max_sep_nm / r_bin_nm - 1e-9)))
    r_edges = np.linspace(0.0, nr * r_bin_nm, nr + 1)
    top = df_max_ghz if df_max_ghz is not None else (float(pairs.detuning.max()) if len(pairs) else df_bin_ghz)
    nd = max(1, int(math.ceil(top / df_bin_ghz - 1e-9)))
    if df_max_ghz is None and nd * df_bin_ghz <= top:
        nd += 1
    df_edges = np.linspace(0.0, nd * df_bin_ghz, nd + 1)
    counts, _, _ = np.histogram2d(pairs.distance, pairs.detuning, bins=(r_edges, df_edges))
    rc = 0.5 * (r_edges[:-1] + r_edges[1:])
    corrected = counts / (2.0 * np.pi * rc * r_bin_nm)[:, None]
    return PairHistograms(pairs, counts, corrected, r_edges, df_edges)


def close_pair_count(records: Sequence[MoleculeRecord], r_max_nm: float = 10.0, df_max_ghz: float = 10.0) -> int:
    """Pairs closer than ``r_max_nm`` and detuned by less than ``df_max_ghz``."""
    recs = _usable(records)
    if len(recs) < 2:
        return 0
    a = record_arrays(recs)
    i, j, d = _kernels.pairs_within(a["x"], a["y"], r_max_nm)
    df = np.abs(a["f0"][i] - a["f0"][j]) / MHZ_PER_GHZ
    return int(np.count_nonzero((d < r_max_nm) & (df < df_max_ghz)))


def expected_close_pairs(n: int, area_nm2: float, r_max_nm: float, p_df: float, side_nm: Optional[float] = None) -> float:
    """Mean close-pair count for n uniform points, given P(|df| < gate) = ``p_df``.

    For a square of side ``side_nm`` the boundary loss is included exactly;
    otherwise the bulk value ``pi r^2 / A`` is used.
    """
    if side_nm is None:
        frac = math.pi * r_max_nm**2 / area_nm2
    else:
        r, L = r_max_nm, side_nm
        frac = (math.pi * r * r - 8.0 * r**3 / (3.0 * L) + r**4 / (2.0 * L * L)) / (L * L)
    return 0.5 * n * (n - 1) * frac * p_df


@dataclass(frozen=True)
class DiffusionStat:
    molecule_id: int
    sigma_f: float  # MHz
    gamma: float  # MHz
    normalized_range: float  # 2 sigma_f / gamma
    n_scans: int


def diffusion_stats(centers, gamma: float, molecule_id: int = 0) -> DiffusionStat:
    """Sample standard deviation (ddof 1) of per-scan line centers."""
    c = np.asarray(centers, dtype=float).ravel()
    if c.size < 2:
        raise DomainError("need at least 2 line centers")
    if not gamma > 0:
        raise DomainError("gamma must be > 0")
    s = float(np.std(c, ddof=1))
    return DiffusionStat(int(molecule_id), s, float(gamma), 2.0 * s / float(gamma), int(c.size))


def cohort_summary(stats: Sequence[DiffusionStat]) -> dict:
    if not stats:
        raise DomainError("empty cohort")
    s = np.array([d.sigma_f for d in stats])
    q = np.array([d.normalized_range for d in stats])
    return {
        "n": len(stats),
        "sigma_f_median": float(np.median(s)),
        "sigma_f_p25": float(np.percentile(s, 25)),
        "sigma_f_p75": float(np.percentile(s, 75)),
        "normalized_range_median": float(np.median(q)),
        "normalized_range_p25": float(np.percentile(q, 25)),
        "normalized_range_p75": float(np.percentile(q, 75)),
    }


@dataclass
class SuperResImage:
    image: np.ndarray  # [row, col]; probability mass per pixel
    origin: tuple[float, float]  # nm, outer corner of pixel (0, 0)
    pixel_size: float


def render_superres(records: Sequence[MoleculeRecord], pixel_size_nm: float = 5.0, margin_sigma: float = 8.0,
                    bounds: Optional[tuple[float, float, float, float]] = None) -> SuperResImage:
    """Sum of unit-mass Gaussians of width ``position_sigma`` at each record."""
    if not records:
        raise DomainError("catalog is empty")
    if not pixel_size_nm > 0:
        raise DomainError("pixel size must be > 0")
    a = record_arrays(records)
    if bounds is None:
        pad = margin_sigma * float(a["sigma"].max())
        bounds = (a["x"].min() - pad, a["y"].min() - pad, a["x"].max() + pad, a["y"].max() + pad)
    x0, y0, x1, y1 = (float(b) for b in bounds)
    w = max(1, int(math.ceil((x1 - x0) / pixel_size_nm)))
    h = max(1, int(math.ceil((y1 - y0) / pixel_size_nm)))
    img = np.zeros((h, w))
    for s in np.unique(a["sigma"]):
        m = a["sigma"] == s
        _kernels.accumulate_psf(img, a["x"][m], a["y"][m], np.ones(int(m.sum())), float(s), x0, y0, pixel_size_nm)
    return SuperResImage(img, (x0, y0), pixel_size_nm)


def write_pgm(image: np.ndarray, path, maxval: int = 65535) -> None:
    """Binary portable graymap, linearly scaled so the maximum maps to ``maxval``."""
    img = np.asarray(image, dtype=float)
    top = float(img.max()) if img.size else 0.0
    scaled = np.zeros(img.shape) if top <= 0 else img / top * maxval
    q = np.rint(scaled).astype(">u2" if maxval > 255 else "u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise FormatError("not a binary PGM at offset 0")
    w, h, maxval = (int(g) for g in m.groups())
    dt = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dt).itemsize
    if len(data) - m.end() != need:
        raise FormatError(f"expected {need} pixel bytes at offset {m.end()}, got {len(data) - m.end()}")
    return np.frombuffer(data, dtype=dt, count=w * h, offset=m.end()).reshape(h, w)
