"""Configuration settings."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from . import __version__
from .errors import ConfigError

logger = logging.getLogger(__name__)

# Trial tally of the recorded dataset, canonical label order P_L, P_M, P_R, G_L, G_M, G_R
RECORDED_COUNTS = {"P_L": 20, "P_M": 23, "P_R": 17, "G_L": 17, "G_M": 19, "G_R": 24}
GIVE_PATTERN_NAMES = ("HandOnly", "FaceOnly", "HandThenFace", "FaceThenHand")
GATE_NAMES = ("PRE", "G", "GH", "GHA", "GHA+")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EmConfig(_Section):
    """EM fitting of the per-label trajectory mixtures."""

    n_components: int = Field(4, ge=1)
    tol: float = Field(1e-8, gt=0)
    max_iters: int = Field(500, ge=1)
    reg_scale: float = Field(1e-6, gt=0)
    kmeans_iters: int = Field(10, ge=0)
    init: Literal["kbins", "kmeans"] = "kbins"
    normalize_time: bool = True
    joint: bool = False  # one (t, x, y, z) model per label instead of three (t, x_i)
    # fraction of the reach duration kept before onset and after the end
    window_pad: float = Field(0.1, ge=0, le=0.5)
    workers: int = Field(1, ge=1)


class NoiseSpec(_Section):
    """Synthesis noise; positions in meters, directions in radians-ish unit-vector units."""

    position_std: float = Field(0.005, ge=0)
    gaze_std: float = Field(0.002, ge=0)
    head_std: float = Field(0.005, ge=0)
    start_jitter: float = Field(0.05, ge=0)

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls(position_std=0.0, gaze_std=0.0, head_std=0.0, start_jitter=0.0)


class TimingConfig(_Section):
    """Event timing of one trial, seconds from grasping the object."""

    saccade_time: float = Field(0.25, gt=0)
    dwell: float = Field(0.4, gt=0)
    switches: int = Field(1, ge=1)
    head_lag: float = Field(0.15, ge=0)
    head_rate_limit: float = Field(2.5, gt=0)  # rad/s, may be inf
    arm_lag: float = Field(0.25, ge=0)
    reach_duration: float = 1.2
    give_reach_duration: float | None = None
    hold: float = Field(0.3, ge=0)

    def reach_for(self, action: str) -> float:
        if action == "G" and self.give_reach_duration is not None:
            return self.give_reach_duration
        return self.reach_duration


class GeometryConfig(_Section):
    """Default tabletop scene (x lateral, y depth, z up)."""

    ball_start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lateral_spacing: float = Field(0.4, gt=0)
    depth: float = Field(0.4, gt=0)
    handover_height: float = Field(0.25, gt=0)
    face_height: float = Field(0.45, gt=0)
    viewpoint: tuple[float, float, float] = (0.0, -0.25, 0.45)


class RatesConfig(_Section):
    hand: float = 120.0
    gaze: float = 60.0
    head: float = 120.0
    video: float = 30.0


class DetectionConfig(_Section):
    """Fixation detection and target assignment."""

    dispersion_threshold: float = Field(0.03, gt=0)
    min_duration: float = Field(0.1, gt=0)
    assignment_radius: float = Field(0.1, gt=0)
    speed_threshold: float = Field(0.05, gt=0)
    head_onset_angle: float = Field(0.05, gt=0)


class EvalConfig(_Section):
    """Gated evaluation and classifier likelihoods."""

    gates: tuple[str, ...] = ("G", "GH", "GHA", "GHA+")
    prior_mode: str = "empirical"
    blur: tuple[str, ...] = ()
    arm_obs_std: float = Field(0.005, gt=0)
    arm_stride: int = Field(4, ge=1)
    head_sigma: float = Field(0.15, gt=0)
    gaze_confusion: float = Field(0.1, ge=0, lt=1)
    observer_gaze_std: float = Field(0.08, ge=0)
    observer_head_std: float = Field(0.08, ge=0)
    gaze_glimpse: float = Field(0.15, gt=0)
    head_glimpse: float = Field(0.25, gt=0)
    arm_glimpse: float = Field(0.25, gt=0)
    pre_margin: float = Field(0.05, gt=0)

    @field_validator("gates")
    @classmethod
    def _known_gates(cls, gates: tuple[str, ...]) -> tuple[str, ...]:
        unknown = [g for g in gates if g not in GATE_NAMES]
        if unknown:
            raise ValueError(f"unknown gates {unknown}, expected any of {list(GATE_NAMES)}")
        return gates

    @field_validator("prior_mode")
    @classmethod
    def _known_prior_mode(cls, mode: str) -> str:
        if mode not in ("empirical", "uniform"):
            raise ValueError("prior_mode must be 'empirical' or 'uniform'")
        return mode

    @field_validator("blur")
    @classmethod
    def _known_blur(cls, blur: tuple[str, ...]) -> tuple[str, ...]:
        if any(b not in ("eyes", "head") for b in blur):
            raise ValueError("blur entries must be 'eyes' or 'head'")
        return blur


class RunConfig(BaseSettings):
    """Fully resolved run configuration.

    Only explicit values count: the JSON config file plus `--set` overrides.
    Environment variables and dotenv files are not read.
    """

    seed: int = 7
    test_seed: int = 8
    counts: dict[str, int] = Field(default_factory=lambda: dict(RECORDED_COUNTS))
    test_counts: dict[str, int] | None = None
    pattern_weights: dict[str, float] = Field(
        default_factory=lambda: {name: 1.0 for name in GIVE_PATTERN_NAMES}
    )
    master_stream: str = "hand_pos"

    em: EmConfig = EmConfig()
    noise: NoiseSpec = NoiseSpec()
    timing: TimingConfig = TimingConfig()
    geometry: GeometryConfig = GeometryConfig()
    rates: RatesConfig = RatesConfig()
    detection: DetectionConfig = DetectionConfig()
    eval: EvalConfig = EvalConfig()

    model_config = SettingsConfigDict(extra="forbid", frozen=True)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)

    @field_validator("counts", "test_counts")
    @classmethod
    def _non_negative_counts(cls, counts: dict[str, int] | None) -> dict[str, int] | None:
        if counts is not None and any(v < 0 for v in counts.values()):
            raise ValueError("counts must be >= 0")
        return counts

    @field_validator("pattern_weights")
    @classmethod
    def _known_patterns(cls, weights: dict[str, float]) -> dict[str, float]:
        unknown = [k for k in weights if k not in GIVE_PATTERN_NAMES]
        if unknown:
            raise ValueError(f"unknown give patterns {unknown}")
        if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise ValueError("pattern weights must be >= 0 with a positive sum")
        return weights


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply `key=value` overrides; dotted keys address nested sections."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not key=value")
        *parents, leaf = key.strip().split(".")
        node = data
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
        value = _parse_value(raw.strip())
        # "--set counts=1,1,1,1,1,1" style lists
        if leaf in ("counts", "test_counts") and isinstance(value, str):
            value = parse_counts(value)
        node[leaf] = value
    return data


def parse_counts(raw: str) -> dict[str, int]:
    """Parse a 6-value comma list in canonical label order into a counts map."""
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if len(parts) != len(RECORDED_COUNTS):
        raise ConfigError(f"counts needs {len(RECORDED_COUNTS)} comma-separated values, got {raw!r}")
    try:
        return {label: int(p) for label, p in zip(RECORDED_COUNTS, parts)}
    except ValueError as exc:
        raise ConfigError(f"counts must be integers: {raw!r}") from exc


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file and flat overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    data = apply_overrides(data, overrides or [])
    try:
        config = RunConfig(**data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid config at {where}: {first['msg']}") from exc
    logger.debug(f"Resolved config hash {config_hash(config)}")
    return config


def config_dump(config: RunConfig) -> dict[str, Any]:
    return config.model_dump(mode="json")


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config_dump(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def provenance(config: RunConfig) -> dict[str, str]:
    """Metadata block written into every output file."""
    return {"tool": "gazereach", "version": __version__, "config_hash": config_hash(config)}
