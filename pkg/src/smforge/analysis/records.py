"""Molecule records, catalog files, and comparison against ground truth."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..rng import as_stream
from ..sample import Sample
from ..units import MHZ_PER_THZ, DomainError, FormatError, thz_to_mhz, wrap_axial

CATALOG_HEADER = ["id", "nc_id", "x_nm", "y_nm", "sigma_nm", "f0_thz", "gamma_mhz", "phi_deg", "site", "flags"]
SITE_THRESHOLD_THZ = 382.0


def site_label(f0_mhz: float, threshold_thz: float = SITE_THRESHOLD_THZ) -> str:
    return "blue" if f0_mhz >= thz_to_mhz(threshold_thz) else "red"


@dataclass(frozen=True)
class MoleculeRecord:
    id: int
    x: float  # nm
    y: float  # nm
    position_sigma: float  # nm, width of the localization PDF
    f0: float  # MHz
    gamma: float  # MHz
    phi: float = math.nan  # deg, nan until a dipole map fills it
    nc_id: int = -1  # -1 when unassigned
    site: str = ""
    flags: tuple[str, ...] = ()
    n_loc: int = 1
    centers: tuple[float, ...] = field(default=(), compare=False)  # per-repetition line centers, MHz

    def __post_init__(self):
        if not self.position_sigma > 0:
            raise DomainError(f"position_sigma must be > 0, got {self.position_sigma}")
        if not self.gamma > 0:
            raise DomainError(f"gamma must be > 0, got {self.gamma}")
        if not self.site:
            object.__setattr__(self, "site", site_label(self.f0))
        if not math.isnan(self.phi):
            object.__setattr__(self, "phi", float(wrap_axial(self.phi)))
        object.__setattr__(self, "flags", tuple(self.flags))
        object.__setattr__(self, "centers", tuple(float(c) for c in self.centers))

    @property
    def ambiguous(self) -> bool:
        return "ambiguous" in self.flags

    def with_(self, **changes) -> MoleculeRecord:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phi"] = None if math.isnan(self.phi) else self.phi
        d["flags"] = list(self.flags)
        d["centers"] = list(self.centers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MoleculeRecord:
        d = dict(d)
        d["phi"] = math.nan if d.get("phi") is None else d["phi"]
        d["flags"] = tuple(d.get("flags", ()))
        d["centers"] = tuple(d.get("centers", ()))
        return cls(**d)


def record_arrays(records: Sequence[MoleculeRecord]) -> dict[str, np.ndarray]:
    return {
        "id": np.array([r.id for r in records], dtype=np.int64),
        "x": np.array([r.x for r in records], dtype=float),
        "y": np.array([r.y for r in records], dtype=float),
        "sigma": np.array([r.position_sigma for r in records], dtype=float),
        "f0": np.array([r.f0 for r in records], dtype=float),
        "gamma": np.array([r.gamma for r in records], dtype=float),
        "phi": np.array([r.phi for r in records], dtype=float),
        "nc_id": np.array([r.nc_id for r in records], dtype=np.int64),
    }


# CSV: floats are written with repr; the THz column is an exact decimal
# shift of the MHz value so it reads back to the same float.

def _thz_text(f0_mhz: float) -> str:
    return format(Decimal(repr(float(f0_mhz))).scaleb(-6), "f")


def _thz_value(text: str) -> float:
    return float(Decimal(text).scaleb(6))


def write_catalog_csv(records: Sequence[MoleculeRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CATALOG_HEADER)
        for r in records:
            w.writerow([
                r.id,
                "" if r.nc_id < 0 else r.nc_id,
                repr(float(r.x)),
                repr(float(r.y)),
                repr(float(r.position_sigma)),
                _thz_text(r.f0),
                repr(float(r.gamma)),
                "" if math.isnan(r.phi) else repr(float(r.phi)),
                r.site,
                ";".join(r.flags),
            ])


def read_catalog_csv(path) -> list[MoleculeRecord]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or rows[0] != CATALOG_HEADER:
        raise FormatError(f"expected header {','.join(CATALOG_HEADER)} at line 1")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CATALOG_HEADER):
            raise FormatError(f"expected {len(CATALOG_HEADER)} fields at line {lineno}, got {len(row)}")
        try:
            out.append(MoleculeRecord(
                id=int(row[0]),
                nc_id=int(row[1]) if row[1] else -1,
                x=float(row[2]),
                y=float(row[3]),
                position_sigma=float(row[4]),
                f0=_thz_value(row[5]),
                gamma=float(row[6]),
                phi=float(row[7]) if row[7] else math.nan,
                site=row[8],
                flags=tuple(f for f in row[9].split(";") if f),
            ))
        except (ValueError, ArithmeticError, DomainError) as exc:
            raise FormatError(f"bad record at line {lineno}: {exc}") from None
    return out


def catalog_to_json(records: Sequence[MoleculeRecord]) -> str:
    return json.dumps([r.to_dict() for r in records], sort_keys=True)


def catalog_from_json(text: str) -> list[MoleculeRecord]:
    return [MoleculeRecord.from_dict(d) for d in json.loads(text)]


def catalog_from_truth(sample: Sample, position_sigma: float = 20.0, phi_sigma: float = 0.0, rng=0,
                       with_phi: bool = True, threshold_thz: float = SITE_THRESHOLD_THZ) -> list[MoleculeRecord]:
    """Records at the true emitter parameters with Gaussian localization noise.

    This is the localization-level shortcut for statistics that need far more
    molecules than a frame-level simulation can afford. Positions are
    perturbed by ``position_sigma`` per axis and dipole angles by
    ``phi_sigma``.
    """
    if not position_sigma > 0:
        raise DomainError("position_sigma must be > 0")
    gen = as_stream(rng, "truth_catalog").generator()
    arr = sample.arrays
    n = arr["id"].size
    dx = gen.standard_normal((n, 2)) * position_sigma
    dphi = gen.standard_normal(n) * phi_sigma
    out = []
    for i in range(n):
        f0 = float(arr["f0"][i])
        out.append(MoleculeRecord(
            id=int(arr["id"][i]),
            x=float(arr["x"][i] + dx[i, 0]),
            y=float(arr["y"][i] + dx[i, 1]),
            position_sigma=position_sigma,
            f0=f0,
            gamma=float(arr["gamma0"][i]),
            phi=float(arr["phi"][i] + dphi[i]) if with_phi else math.nan,
            nc_id=int(arr["nc_id"][i]),
            site=site_label(f0, threshold_thz),
        ))
    return out


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (record index, truth emitter id)
    missed: list[int]  # truth emitter ids without a record
    spurious: list[int]  # record indices without a truth emitter

    @property
    def recall(self) -> float:
        n = len(self.pairs) + len(self.missed)
        return len(self.pairs) / n if n else 1.0


def match_to_truth(records: Sequence[MoleculeRecord], sample: Sample, position_nm: float = 50.0,
                   gamma_factor: float = 3.0, truth_ids: Optional[Sequence[int]] = None) -> MatchResult:
    """Greedy one-to-one matching, closest pairs first, under both gates.

    The frequency gate is ``gamma_factor`` times the true linewidth.
    ``truth_ids`` restricts the ground truth (for example to emitters whose
    lines fall inside the scanned window).
    """
    arr = sample.arrays
    keep = np.ones(arr["id"].size, dtype=bool) if truth_ids is None else np.isin(arr["id"], list(truth_ids))
    tid, tx, ty = arr["id"][keep], arr["x"][keep], arr["y"][keep]
    tf, tg = arr["f0"][keep], arr["gamma0"][keep]
    ra = record_arrays(records)
    cand = []
    for i in range(len(records)):
        d = np.hypot(tx - ra["x"][i], ty - ra["y"][i])
        ok = (d <= position_nm) & (np.abs(tf - ra["f0"][i]) <= gamma_factor * tg)
        for j in np.flatnonzero(ok):
            cand.append((float(d[j]), i, int(j)))
    cand.sort()
    used_r, used_t, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_r or j in used_t:
            continue
        used_r.add(i)
        used_t.add(j)
        pairs.append((i, int(tid[j])))
    missed = [int(tid[j]) for j in range(tid.size) if j not in used_t]
    spurious = [i for i in range(len(records)) if i not in used_r]
    return MatchResult(sorted(pairs), missed, spurious)
