"""Virtual printed samples: nanocrystals populated with emitters.

Dipole orientations follow an axial three-lobe Gaussian mixture about each
crystal's axis, resonance frequencies follow a two-site inhomogeneous model,
and positions are uniform inside each crystal's footprint.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .config import ConfigError, Distribution, SampleConfig
from .photophysics import EmitterParams, Site
from .rng import Stream
from .units import MHZ_PER_GHZ, MHZ_PER_THZ, DomainError, wrap_axial

_SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class MixtureParams:
    """a N(0, sigma0) + (1 - a)/2 [N(+phi_prime, sigma1) + N(-phi_prime, sigma1)], degrees."""

    a: float = 0.63
    sigma0: float = 6.0
    phi_prime: float = 29.0
    sigma1: float = 12.5

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise DomainError(f"a must be in [0, 1], got {self.a}")
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise DomainError("sigma0 and sigma1 must be > 0")
        if not 0.0 <= self.phi_prime <= 90.0:
            raise DomainError(f"phi_prime must be in [0, 90], got {self.phi_prime}")

    def components(self):
        """(weights, means, sigmas) of the three lobes."""
        w = (1.0 - self.a) / 2.0
        return (
            np.array([self.a, w, w]),
            np.array([0.0, self.phi_prime, -self.phi_prime]),
            np.array([self.sigma0, self.sigma1, self.sigma1]),
        )

    def as_tuple(self):
        return (self.a, self.sigma0, self.phi_prime, self.sigma1)


def _n_images(sigma: float) -> int:
    return int(math.ceil(8.0 * sigma / 180.0)) + 1


def wrapped_normal_pdf(x, mean, sigma):
    """Gaussian wrapped onto the 180-degree axial circle, density per degree."""
    x = np.asarray(x, dtype=float)
    k = np.arange(-_n_images(sigma), _n_images(sigma) + 1)
    z = (x[..., None] - mean + 180.0 * k) / sigma
    return np.exp(-0.5 * z * z).sum(axis=-1) / (_SQRT2PI * sigma)


def wrapped_normal_cdf(x, mean, sigma):
    """Mass of the wrapped Gaussian on (-90, x] for x in (-90, 90]."""
    x = np.asarray(x, dtype=float)
    k = np.arange(-_n_images(sigma), _n_images(sigma) + 1)
    hi = ndtr((x[..., None] - mean + 180.0 * k) / sigma)
    lo = ndtr((-90.0 - mean + 180.0 * k) / sigma)
    return (hi - lo).sum(axis=-1)


def mixture_pdf(phi, m: MixtureParams):
    """Density per degree of the dipole-angle mixture at axial angle ``phi``."""
    if not isinstance(m, MixtureParams):
        raise DomainError("m must be MixtureParams")
    x = wrap_axial(phi)
    w, mu, sd = m.components()
    out = sum(wi * wrapped_normal_pdf(x, mi, si) for wi, mi, si in zip(w, mu, sd))
    return float(out) if np.ndim(out) == 0 else out


def mixture_cdf(phi, m: MixtureParams):
    """Cumulative mixture mass on (-90, phi]; ``phi`` is taken as given in (-90, 90]."""
    w, mu, sd = m.components()
    out = sum(wi * wrapped_normal_cdf(phi, mi, si) for wi, mi, si in zip(w, mu, sd))
    return float(out) if np.ndim(out) == 0 else out


def sample_dipoles(m: MixtureParams, n: int, gen: np.random.Generator) -> np.ndarray:
    w, mu, sd = m.components()
    lobe = gen.choice(3, size=n, p=w / w.sum())
    z = gen.standard_normal(n)
    return wrap_axial(mu[lobe] + sd[lobe] * z) if n else np.empty(0)


def sample_dipole(m: MixtureParams, rng: Stream) -> float:
    """One mixture draw from a dedicated stream."""
    return float(sample_dipoles(m, 1, rng.generator())[0])


@dataclass(frozen=True)
class SiteModel:
    center_red: float = 377.4 * MHZ_PER_THZ  # MHz
    center_blue: float = 381.9 * MHZ_PER_THZ  # MHz
    ib_width_red_ghz: float = 500.0
    ib_width_blue_ghz: float = 500.0
    blue_fraction: float = 0.95

    def __post_init__(self):
        if not (self.ib_width_red_ghz > 0 and self.ib_width_blue_ghz > 0):
            raise DomainError("inhomogeneous widths must be > 0")
        if not 0.0 <= self.blue_fraction <= 1.0:
            raise DomainError("blue_fraction must be in [0, 1]")

    @classmethod
    def from_config(cls, c) -> SiteModel:
        return cls(
            c.center_red_thz * MHZ_PER_THZ,
            c.center_blue_thz * MHZ_PER_THZ,
            c.ib_width_red_ghz,
            c.ib_width_blue_ghz,
            c.blue_fraction,
        )


def sample_frequencies(site_model: SiteModel, n: int, gen: np.random.Generator):
    blue = gen.random(n) < site_model.blue_fraction
    z = gen.standard_normal(n)
    f = np.where(
        blue,
        site_model.center_blue + z * site_model.ib_width_blue_ghz * MHZ_PER_GHZ,
        site_model.center_red + z * site_model.ib_width_red_ghz * MHZ_PER_GHZ,
    )
    return blue, f


def sample_frequency(site_model: SiteModel, rng: Stream) -> tuple[Site, float]:
    """Draw (site, absolute frequency in MHz) for one emitter."""
    blue, f = sample_frequencies(site_model, 1, rng.generator())
    return (Site.BLUE if blue[0] else Site.RED), float(f[0])


@dataclass(frozen=True)
class Emitter:
    id: int
    nc_id: int
    x: float  # nm
    y: float  # nm
    params: EmitterParams


@dataclass
class Nanocrystal:
    id: int
    center: tuple[float, float]
    axis_angle: float
    radius: float
    emitters: list[Emitter] = field(default_factory=list)


@dataclass
class Sample:
    nanocrystals: list[Nanocrystal]
    bbox: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax in nm
    seed: int

    @cached_property
    def emitters(self) -> list[Emitter]:
        return [e for nc in self.nanocrystals for e in nc.emitters]

    @cached_property
    def _by_id(self) -> dict[int, Emitter]:
        return {e.id: e for e in self.emitters}

    def emitter(self, emitter_id: int) -> Emitter:
        try:
            return self._by_id[int(emitter_id)]
        except KeyError:
            raise LookupError(f"unknown emitter id {emitter_id}") from None

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        """Column arrays over all emitters, in id order of appearance."""
        es = self.emitters
        p = [e.params for e in es]
        return {
            "id": np.array([e.id for e in es], dtype=np.int64),
            "nc_id": np.array([e.nc_id for e in es], dtype=np.int64),
            "x": np.array([e.x for e in es], dtype=float),
            "y": np.array([e.y for e in es], dtype=float),
            "f0": np.array([q.f0 for q in p], dtype=float),
            "gamma0": np.array([q.gamma0 for q in p], dtype=float),
            "p_sat": np.array([q.p_sat for q in p], dtype=float),
            "f_inf": np.array([q.f_inf for q in p], dtype=float),
            "phi": np.array([q.phi for q in p], dtype=float),
            "sigma_f": np.array([q.sigma_f for q in p], dtype=float),
            "blue": np.array([q.site is Site.BLUE for q in p], dtype=bool),
        }

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "bbox_nm": list(self.bbox),
            "nanocrystals": [
                {"id": nc.id, "center_nm": list(nc.center), "axis_angle_deg": nc.axis_angle, "radius_nm": nc.radius}
                for nc in self.nanocrystals
            ],
            "emitters": [
                {
                    "id": e.id,
                    "nc_id": e.nc_id,
                    "x_nm": e.x,
                    "y_nm": e.y,
                    "site": e.params.site.value,
                    "f0_thz": e.params.f0 / MHZ_PER_THZ,
                    "f0_mhz": e.params.f0,
                    "gamma0_mhz": e.params.gamma0,
                    "p_sat_nw": e.params.p_sat,
                    "f_inf_kcps": e.params.f_inf,
                    "phi_deg": e.params.phi,
                    "sigma_f_mhz": e.params.sigma_f,
                    "jump_rate": e.params.jump_rate,
                    "jump_scale_mhz": e.params.jump_scale,
                }
                for e in self.emitters
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> Sample:
        ncs = {
            n["id"]: Nanocrystal(n["id"], tuple(n["center_nm"]), n["axis_angle_deg"], n["radius_nm"])
            for n in d["nanocrystals"]
        }
        for r in d["emitters"]:
            f0 = r["f0_mhz"] if "f0_mhz" in r else r["f0_thz"] * MHZ_PER_THZ
            params = EmitterParams(
                f0=f0,
                gamma0=r["gamma0_mhz"],
                p_sat=r["p_sat_nw"],
                f_inf=r["f_inf_kcps"],
                phi=r["phi_deg"],
                sigma_f=r["sigma_f_mhz"],
                jump_rate=r.get("jump_rate", 0.0),
                jump_scale=r.get("jump_scale_mhz", 150.0),
                site=Site(r["site"]),
            )
            ncs[r["nc_id"]].emitters.append(Emitter(r["id"], r["nc_id"], r["x_nm"], r["y_nm"], params))
        return cls(list(ncs.values()), tuple(d["bbox_nm"]), d["seed"])

    @classmethod
    def from_json(cls, text: str) -> Sample:
        return cls.from_dict(json.loads(text))


def _draw(dist: Distribution, gen: np.random.Generator) -> float:
    z = gen.standard_normal()
    return dist.minimum + (dist.median - dist.minimum) * math.exp(dist.sigma_log * z)


def _count(cfg, nc_index: int, n_nc: int, gen: np.random.Generator) -> int:
    c = cfg.emitters_per_nc
    if c.counts is not None:
        return c.counts[nc_index]
    if c.fixed is not None:
        return c.fixed
    for _ in range(10_000):
        k = int(gen.poisson(c.mean))
        if k >= c.min:
            return k
    return c.min


DensityHook = Callable[[float, float, Site], float]


def _make_nc(cfg: SampleConfig, root: Stream, i: int, center, mixture, sites, density_hook) -> Nanocrystal:
    gen = root.child("nc", i).generator()
    jitter = gen.normal(0.0, cfg.position_jitter_nm, 2) if cfg.position_jitter_nm > 0 else np.zeros(2)
    axis = 90.0 - 180.0 * gen.random()  # uniform on (-90, 90]
    if cfg.axis_angle_deg is not None:
        axis = wrap_axial(cfg.axis_angle_deg)
    n_nc = cfg.grid[0] * cfg.grid[1]
    count = _count(cfg, i, n_nc, gen)
    cx, cy = float(center[0] + jitter[0]), float(center[1] + jitter[1])
    nc = Nanocrystal(i, (cx, cy), float(axis), cfg.nc_radius_nm)
    R = cfg.nc_radius_nm
    for j in range(count):
        g = root.child("emitter", i, j).generator()
        blue, f = sample_frequencies(sites, 1, g)
        site = Site.BLUE if blue[0] else Site.RED
        for _ in range(10_000):
            if cfg.shape == "disc":
                r = R * math.sqrt(g.random())
                t = 2.0 * math.pi * g.random()
                dx, dy = r * math.cos(t), r * math.sin(t)
            else:
                dx, dy = R * (2.0 * g.random() - 1.0), R * (2.0 * g.random() - 1.0)
            if density_hook is None or g.random() < density_hook(cx + dx, cy + dy, site):
                break
        phi = wrap_axial(axis + sample_dipoles(mixture, 1, g)[0])
        params = EmitterParams(
            f0=float(f[0]),
            gamma0=_draw(cfg.gamma0_mhz, g),
            p_sat=_draw(cfg.p_sat_nw, g),
            f_inf=_draw(cfg.f_inf_kcps, g),
            phi=phi,
            sigma_f=_draw(cfg.sigma_f_mhz, g),
            jump_rate=cfg.jump_rate,
            jump_scale=cfg.jump_scale_mhz,
            site=site,
        )
        nc.emitters.append(Emitter(-1, i, cx + dx, cy + dy, params))
    return nc


def synthesize(
    cfg: SampleConfig,
    seed: int,
    threads: int = 1,
    density_hook: Optional[DensityHook] = None,
) -> Sample:
    """Generate a sample deterministically from ``cfg`` and ``seed``.

    ``density_hook(x, y, site)`` may return an acceptance probability in
    [0, 1] to shape the spatial emitter density; the default is uniform.
    """
    if not isinstance(cfg, SampleConfig):
        cfg = SampleConfig.model_validate(cfg)
    nx, ny = cfg.grid
    n_nc = nx * ny
    if cfg.emitters_per_nc.counts is not None and len(cfg.emitters_per_nc.counts) != n_nc:
        raise ConfigError([{"loc": "sample.emitters_per_nc.counts", "msg": f"expected {n_nc} entries", "type": "value"}])
    for k, extra in enumerate(cfg.extra_emitters):
        if extra.nc >= n_nc:
            raise ConfigError([{"loc": f"sample.extra_emitters.{k}.nc", "msg": "no such nanocrystal", "type": "value"}])

    root = Stream(seed, ("sample",))
    mixture = MixtureParams(cfg.mixture.a, cfg.mixture.sigma0, cfg.mixture.phi_prime, cfg.mixture.sigma1)
    sites = SiteModel.from_config(cfg.sites)
    centers = [
        ((ix - (nx - 1) / 2.0) * cfg.pitch_nm, (iy - (ny - 1) / 2.0) * cfg.pitch_nm)
        for iy in range(ny)
        for ix in range(nx)
    ]

    def build(i):
        return _make_nc(cfg, root, i, centers[i], mixture, sites, density_hook)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            ncs = list(ex.map(build, range(n_nc)))
    else:
        ncs = [build(i) for i in range(n_nc)]

    for extra in cfg.extra_emitters:
        nc = ncs[extra.nc]
        params = EmitterParams(
            f0=extra.f0_thz * MHZ_PER_THZ,
            gamma0=extra.gamma0_mhz,
            p_sat=extra.p_sat_nw,
            f_inf=extra.f_inf_kcps,
            phi=extra.phi_deg,
            sigma_f=extra.sigma_f_mhz,
            jump_rate=extra.jump_rate,
            jump_scale=extra.jump_scale_mhz,
            site=Site(extra.site),
        )
        nc.emitters.append(Emitter(-1, nc.id, nc.center[0] + extra.x_nm, nc.center[1] + extra.y_nm, params))

    next_id = 0
    for nc in ncs:
        renumbered = []
        for e in nc.emitters:
            renumbered.append(Emitter(next_id, e.nc_id, e.x, e.y, e.params))
            next_id += 1
        nc.emitters = renumbered

    R = cfg.nc_radius_nm
    xs = [nc.center[0] - R for nc in ncs] + [nc.center[0] + R for nc in ncs]
    ys = [nc.center[1] - R for nc in ncs] + [nc.center[1] + R for nc in ncs]
    for nc in ncs:
        xs.extend(e.x for e in nc.emitters)
        ys.extend(e.y for e in nc.emitters)
    bbox = (min(xs), min(ys), max(xs), max(ys))
    return Sample(ncs, bbox, int(seed))


def sample_from_emitters(params: Sequence[EmitterParams], positions, seed: int = 0, radius: float = 425.0) -> Sample:
    """A one-crystal sample holding the given emitters (handy for controlled tests)."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(params) != pos.shape[0]:
        raise DomainError("need one position per emitter")
    emitters = [Emitter(i, 0, float(x), float(y), p) for i, (p, (x, y)) in enumerate(zip(params, pos))]
    c = tuple(pos.mean(axis=0)) if len(pos) else (0.0, 0.0)
    nc = Nanocrystal(0, (float(c[0]), float(c[1])), 0.0, radius, emitters)
    if len(pos):
        bbox = (float(pos[:, 0].min()), float(pos[:, 1].min()), float(pos[:, 0].max()), float(pos[:, 1].max()))
    else:
        bbox = (0.0, 0.0, 0.0, 0.0)
    return Sample([nc], bbox, seed)
