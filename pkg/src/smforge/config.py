"""Scenario configuration: a single strict JSON document.

Unknown keys are rejected and every default is materialised when the config
is dumped, so a run manifest fully determines the run.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class ConfigError(ValueError):
    """Invalid scenario config. ``errors`` holds one dict per offending field."""

    def __init__(self, errors: list[dict]):
        self.errors = errors
        lines = "; ".join(f"{e['loc']}: {e['msg']}" for e in errors)
        super().__init__(f"invalid config: {lines}")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Distribution(_Strict):
    """Shifted log-normal: ``minimum + (median - minimum) * exp(sigma_log * z)``."""

    minimum: float = Field(0.0, ge=0)
    median: float = Field(gt=0)
    sigma_log: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _median_above_minimum(self):
        if self.median < self.minimum:
            raise ValueError("median must be >= minimum")
        return self


class SiteModelConfig(_Strict):
    center_red_thz: float = Field(377.4, gt=0)
    center_blue_thz: float = Field(381.9, gt=0)
    ib_width_red_ghz: float = Field(500.0, gt=0)
    ib_width_blue_ghz: float = Field(500.0, gt=0)
    blue_fraction: float = Field(0.95, ge=0, le=1)


class MixtureConfig(_Strict):
    a: float = Field(0.63, ge=0, le=1)
    sigma0: float = Field(6.0, gt=0)
    phi_prime: float = Field(29.0, ge=0, le=90)
    sigma1: float = Field(12.5, gt=0)


class CountConfig(_Strict):
    mean: float = Field(4.0, gt=0)
    min: int = Field(0, ge=0)
    fixed: Optional[int] = Field(None, ge=0)
    counts: Optional[list[int]] = None

    @field_validator("counts")
    @classmethod
    def _non_negative(cls, v):
        if v is not None and any(c < 0 for c in v):
            raise ValueError("counts must be non-negative")
        return v


class ExtraEmitter(_Strict):
    nc: int = Field(0, ge=0)
    x_nm: float
    y_nm: float
    f0_thz: float = Field(gt=0)
    gamma0_mhz: float = Field(gt=0)
    p_sat_nw: float = Field(3.6, gt=0)
    f_inf_kcps: float = Field(257.0, ge=0)
    phi_deg: float = 0.0
    sigma_f_mhz: float = Field(0.0, ge=0)
    jump_rate: float = Field(0.0, ge=0, le=1)
    jump_scale_mhz: float = Field(150.0, ge=0)
    site: Literal["red", "blue"] = "blue"


class SampleConfig(_Strict):
    grid: tuple[int, int] = (1, 1)
    pitch_nm: float = Field(3000.0, gt=0)
    position_jitter_nm: float = Field(0.0, ge=0)
    shape: Literal["disc", "square"] = "disc"
    nc_radius_nm: float = Field(425.0, gt=0)
    axis_angle_deg: Optional[float] = None
    emitters_per_nc: CountConfig = CountConfig()
    sites: SiteModelConfig = SiteModelConfig()
    mixture: MixtureConfig = MixtureConfig()
    gamma0_mhz: Distribution = Distribution(minimum=41.0, median=60.0, sigma_log=0.5)
    p_sat_nw: Distribution = Distribution(median=3.6)
    f_inf_kcps: Distribution = Distribution(median=257.0)
    sigma_f_mhz: Distribution = Distribution(median=26.0)
    jump_rate: float = Field(0.0, ge=0, le=1)
    jump_scale_mhz: float = Field(150.0, ge=0)
    density_map: Literal["uniform"] = "uniform"
    extra_emitters: list[ExtraEmitter] = []

    @field_validator("grid")
    @classmethod
    def _grid_positive(cls, v):
        if v[0] < 1 or v[1] < 1:
            raise ValueError("grid dims must be >= 1")
        return v


class ScanModel(_Strict):
    f_start_thz: Optional[float] = Field(None, gt=0)
    f_stop_thz: Optional[float] = Field(None, gt=0)
    span_mhz: Optional[float] = Field(None, gt=0)
    scan_rate_mhz_s: float = Field(700.0, gt=0)
    exposure_s: float = Field(0.01, gt=0)
    repetitions: int = Field(1, ge=1)
    power_nw: float = Field(0.5, ge=0)
    theta_exc_deg: float = 0.0
    background_kcps: float = Field(0.0, ge=0)
    noise: bool = True

    @model_validator(mode="after")
    def _range(self):
        absolute = self.f_start_thz is not None and self.f_stop_thz is not None
        if not absolute and self.span_mhz is None:
            raise ValueError("give f_start_thz and f_stop_thz, or span_mhz")
        if absolute and self.f_stop_thz <= self.f_start_thz:
            raise ValueError("f_stop_thz must exceed f_start_thz")
        return self


class CameraModel(_Strict):
    pixel_size_nm: float = Field(100.0, gt=0)
    width: int = Field(128, ge=1)
    height: int = Field(128, ge=1)
    psf_sigma_nm: float = Field(130.0, gt=0)
    background: float = Field(2.0, ge=0)
    drift_velocity_nm_per_hour: tuple[float, float] = (20.0, 0.0)
    drift_rw_sigma_nm: float = Field(0.5, ge=0)
    origin_nm: Optional[tuple[float, float]] = None
    noise: bool = True
    clip_max: Optional[int] = Field(None, ge=1)
    nw_per_w_cm2: float = Field(1.0, gt=0)


class ConfocalModel(_Strict):
    scan: ScanModel
    emitter_ids: list[int] = [0]


class SaturationModel(_Strict):
    scan: ScanModel
    powers_nw: list[float] = [0.17, 1.6, 6.6, 95.0]
    emitter_ids: list[int] = [0]

    @field_validator("powers_nw")
    @classmethod
    def _powers(cls, v):
        if not v or any(p < 0 for p in v):
            raise ValueError("powers must be non-empty and >= 0")
        return v


class PolarizationModel(_Strict):
    scan: ScanModel
    angles_deg: list[float] = [i * 18.0 for i in range(10)]

    @field_validator("angles_deg")
    @classmethod
    def _distinct(cls, v):
        from .units import wrap_axial

        if len({round(wrap_axial(a), 9) for a in v}) < 2:
            raise ValueError("need at least 2 distinct polarization angles")
        return v


class InstrumentConfig(_Strict):
    camera: CameraModel = CameraModel()
    widefield: Optional[ScanModel] = None
    confocal: Optional[ConfocalModel] = None
    saturation: Optional[SaturationModel] = None
    polarization: Optional[PolarizationModel] = None


class AnalysisConfig(_Strict):
    detection_snr: float = Field(5.0, gt=0)
    link_radius_px: float = Field(1.5, gt=0)
    roi_half_px: int = Field(5, ge=3)
    merge_gate_sigma: float = Field(3.0, gt=0)
    min_merge_nm: float = Field(30.0, ge=0)
    match_position_nm: float = Field(50.0, gt=0)
    match_gamma_factor: float = Field(3.0, gt=0)
    site_threshold_thz: float = Field(382.0, gt=0)
    pair_max_sep_nm: float = Field(150.0, gt=0)
    pair_r_bin_nm: float = Field(5.0, gt=0)
    pair_df_bin_ghz: float = Field(1.0, gt=0)
    close_r_nm: float = Field(10.0, gt=0)
    close_df_ghz: float = Field(10.0, gt=0)
    dphi_bin_deg: float = Field(2.5, gt=0)
    min_per_nc: int = Field(3, ge=1)
    superres_pixel_nm: float = Field(5.0, gt=0)
    weighting: Literal["poisson", "none"] = "poisson"
    drift_detrend: bool = False
    # localization noise for catalogs built directly from ground truth
    truth_position_sigma_nm: float = Field(20.0, gt=0)
    truth_phi_sigma_deg: float = Field(0.0, ge=0)
    permutations: int = Field(2000, ge=10)


class RoundtripTolerances(_Strict):
    saturation_rel: float = Field(0.10, gt=0)
    linewidth_rel: float = Field(0.10, gt=0)
    sigma_f_rel: float = Field(0.10, gt=0)
    position_nm: float = Field(10.0, gt=0)
    recall: float = Field(0.95, ge=0, le=1)
    phi_deg: float = Field(2.0, gt=0)
    mixture_a: tuple[float, float] = (0.55, 0.71)
    mixture_phi_prime: tuple[float, float] = (26.0, 32.0)
    mixture_sigma0: tuple[float, float] = (4.5, 7.5)
    mixture_sigma1: tuple[float, float] = (9.0, 16.0)


class ScenarioConfig(_Strict):
    name: str = "scenario"
    seed: int = Field(0, ge=0, lt=2**64)
    sample: SampleConfig = SampleConfig()
    instrument: InstrumentConfig = InstrumentConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    tolerances: RoundtripTolerances = RoundtripTolerances()

    def materialized(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.materialized())).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _errors(exc: ValidationError) -> list[dict]:
    return [{"loc": ".".join(str(p) for p in e["loc"]) or "<root>", "msg": e["msg"], "type": e["type"]} for e in exc.errors()]


def parse_config(data: dict, seed: Optional[int] = None) -> ScenarioConfig:
    if seed is not None:
        data = {**data, "seed": seed}
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_errors(exc)) from None


def load_config(path, seed: Optional[int] = None) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([{"loc": "<file>", "msg": f"not valid JSON: {exc}", "type": "json"}]) from None
    if not isinstance(data, dict):
        raise ConfigError([{"loc": "<root>", "msg": "config must be a JSON object", "type": "type"}])
    return parse_config(data, seed)


def bundled_scenarios() -> dict[str, Path]:
    root = Path(__file__).parent / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.json"))}
