"""Run configuration: one YAML file, strict keys, command-line overrides.

Every knob of every stage lives in one ``PipelineConfig`` built from
defaults, an optional YAML file (``load_config``), and ``section.key=value``
assignments (``apply_overrides``).  Unknown sections or keys are rejected
with their dotted path, and the resolved configuration is echoed into the
metrics report so a run is reproducible from its own output.
"""

import math
import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .camera import CameraIntrinsics
from .geometry import Pose, RigExtrinsics
from .local_sfm import ReconstructionConfig
from .pose_graph import PgoWeights
from .simulator import NoiseModel, SurveyConfig, WeakStrip
from .weak_area import WeakAreaConfig

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "apply_overrides",
    "load_config",
]

CONFIG_ENV_VAR = "NAVSFM_CONFIG"

PIPELINE_MODES = ("hierarchical", "single_cluster")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    """Execution-wide knobs shared by every stage."""

    seed: int = 0
    threads: int = 4
    mode: str = "hierarchical"

    def __post_init__(self) -> None:
        if self.mode not in PIPELINE_MODES:
            raise ConfigError(
                f"run.mode must be one of {', '.join(PIPELINE_MODES)}; got {self.mode!r}"
            )
        if self.threads < 1:
            raise ConfigError("run.threads must be >= 1")


@dataclass(frozen=True)
class CameraSettings:
    """Fisheye intrinsics of the survey camera (defaults match the
    simulator's rig, so simulator output reconstructs with no file)."""

    fx: float = 600.0
    fy: float = 600.0
    cx: float = 511.5
    cy: float = 511.5
    k1: float = -0.012
    k2: float = 0.003
    k3: float = -0.0008
    k4: float = 0.0002
    width: int = 1024
    height: int = 1024

    def to_intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            k=(self.k1, self.k2, self.k3, self.k4),
            width=self.width,
            height=self.height,
        )


@dataclass(frozen=True)
class RigSettings:
    """Camera-to-vehicle-body offset as quaternion (scalar first) plus
    translation; the default is the simulator's nadir camera."""

    qw: float = 0.0
    qx: float = 0.7071067811865476
    qy: float = 0.7071067811865476
    qz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = -0.25

    def to_rig(self) -> RigExtrinsics:
        return RigExtrinsics(
            Pose((self.qw, self.qx, self.qy, self.qz), (self.tx, self.ty, self.tz))
        )


@dataclass(frozen=True)
class MatchingSettings:
    """Two-view geometric verification (pairwise RANSAC)."""

    threshold_rad: float = 1e-3
    confidence: float = 0.999
    max_iterations: int = 500
    min_inliers: int = 15
    min_inlier_ratio: float = 0.25


@dataclass(frozen=True)
class PartitionSettings:
    target_cluster_size: int = 150
    overlap_ratio: float = 0.2


@dataclass(frozen=True)
class LocalSfmSettings:
    """Per-cluster incremental reconstruction."""

    min_seed_baseline_m: float = 0.05
    min_seed_parallax_deg: float = 1.0
    min_seed_survival: float = 0.5
    min_2d3d: int = 6
    pnp_threshold_rad: float = 8e-3
    min_triangulation_angle_deg: float = 1.0
    max_point_reproj_px: float = 4.0
    robust_width_px: float = 2.0
    prior_rot_weight: float = 1.0
    prior_trans_weight: float = 1.0
    ba_max_iterations: int = 30

    def to_reconstruction_config(self, seed: int) -> ReconstructionConfig:
        return ReconstructionConfig(
            min_seed_baseline_m=self.min_seed_baseline_m,
            min_seed_parallax_deg=self.min_seed_parallax_deg,
            min_seed_survival=self.min_seed_survival,
            min_2d3d=self.min_2d3d,
            pnp_threshold_rad=self.pnp_threshold_rad,
            min_triangulation_angle_deg=self.min_triangulation_angle_deg,
            max_point_reproj_px=self.max_point_reproj_px,
            robust_width_px=self.robust_width_px,
            prior_rot_weight=self.prior_rot_weight,
            prior_trans_weight=self.prior_trans_weight,
            ba_max_iterations=self.ba_max_iterations,
            seed=seed,
        )


@dataclass(frozen=True)
class WeakAreaSettings:
    mu: int = 50
    weak_ratio: float = 0.2
    max_rounds: int = 2
    hops: int = 2
    merge_overlap: float = 0.5

    def to_config(self) -> WeakAreaConfig:
        return WeakAreaConfig(
            mu=self.mu,
            weak_ratio=self.weak_ratio,
            max_rounds=self.max_rounds,
            hops=self.hops,
            merge_overlap=self.merge_overlap,
        )


@dataclass(frozen=True)
class PoseGraphSettings:
    rho_rel: float = 1.0
    rho_abs: float = 0.001
    rho_sm: float = 2.0
    min_shared: int = 5
    weight_cap: int = 200
    weighted: bool = True

    def to_weights(self) -> PgoWeights:
        return PgoWeights(rho_rel=self.rho_rel, rho_abs=self.rho_abs, rho_sm=self.rho_sm)


@dataclass(frozen=True)
class GlobalRefineSettings:
    """Track re-triangulation gates and the survey-wide bundle."""

    max_reproj_px: float = 4.0
    min_triangulation_angle_deg: float = 1.0
    refine_intrinsics: bool = True
    refine_rig: bool = True
    ba_max_iterations: int = 30

    def to_reconstruction_config(self, local: LocalSfmSettings, seed: int) -> ReconstructionConfig:
        base = local.to_reconstruction_config(seed)
        return replace(
            base,
            min_triangulation_angle_deg=self.min_triangulation_angle_deg,
            max_point_reproj_px=self.max_reproj_px,
            refine_intrinsics=self.refine_intrinsics,
            refine_rig=self.refine_rig,
            ba_max_iterations=self.ba_max_iterations,
        )


@dataclass(frozen=True)
class StripSettings:
    """Degraded-imaging region for simulation; infinite bounds leave the
    axis unbounded."""

    x_min: float = float("-inf")
    x_max: float = float("inf")
    y_min: float = float("-inf")
    y_max: float = float("inf")
    multiplier: float = 0.9

    def to_strip(self) -> WeakStrip:
        x = None if math.isinf(self.x_min) and math.isinf(self.x_max) else (self.x_min, self.x_max)
        y = None if math.isinf(self.y_min) and math.isinf(self.y_max) else (self.y_min, self.y_max)
        return WeakStrip(x_range=x, y_range=y, multiplier=self.multiplier)


@dataclass(frozen=True)
class SimulateSettings:
    """Synthetic survey layout and measurement corruption."""

    track_count: int = 4
    track_length: float = 48.0
    track_spacing: float = 5.0
    altitude: float = 8.0
    image_interval: float = 2.0
    cross_track: bool = True
    terrain_amplitude: float = 0.8
    terrain_roughness: float = 1.0
    landmark_density: float = 0.5
    fov_margin: float = 0.85
    seed: int = 0
    nav_pos_sigma_m: float = 0.0
    nav_rot_sigma_deg: float = 0.0
    nav_drift_rate_m: float = 0.0
    nav_rot_drift_rate_deg: float = 0.0
    pixel_sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    dropout_fraction: float = 0.0
    nav_seed: int = 1
    render_seed: int = 2
    weak_strips: tuple[StripSettings, ...] = ()

    def to_survey_config(self) -> SurveyConfig:
        return SurveyConfig(
            track_count=self.track_count,
            track_length=self.track_length,
            track_spacing=self.track_spacing,
            altitude=self.altitude,
            image_interval=self.image_interval,
            cross_track=self.cross_track,
            terrain_amplitude=self.terrain_amplitude,
            terrain_roughness=self.terrain_roughness,
            landmark_density=self.landmark_density,
            fov_margin=self.fov_margin,
            seed=self.seed,
        )

    def to_noise_model(self) -> NoiseModel:
        return NoiseModel(
            nav_pos_sigma_m=self.nav_pos_sigma_m,
            nav_rot_sigma_deg=self.nav_rot_sigma_deg,
            nav_drift_rate_m=self.nav_drift_rate_m,
            nav_rot_drift_rate_deg=self.nav_rot_drift_rate_deg,
            pixel_sigma_px=self.pixel_sigma_px,
            outlier_fraction=self.outlier_fraction,
            dropout_fraction=self.dropout_fraction,
            weak_strips=tuple(s.to_strip() for s in self.weak_strips),
        )


@dataclass(frozen=True)
class PipelineConfig:
    run: RunSettings = field(default_factory=RunSettings)
    camera: CameraSettings = field(default_factory=CameraSettings)
    rig: RigSettings = field(default_factory=RigSettings)
    matching: MatchingSettings = field(default_factory=MatchingSettings)
    partition: PartitionSettings = field(default_factory=PartitionSettings)
    local_sfm: LocalSfmSettings = field(default_factory=LocalSfmSettings)
    weak_area: WeakAreaSettings = field(default_factory=WeakAreaSettings)
    pose_graph: PoseGraphSettings = field(default_factory=PoseGraphSettings)
    global_refine: GlobalRefineSettings = field(default_factory=GlobalRefineSettings)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)

    def to_dict(self) -> dict:
        """Plain nested dict (JSON- and YAML-serializable)."""
        out = asdict(self)
        out["simulate"]["weak_strips"] = [dict(s) for s in out["simulate"]["weak_strips"]]
        return out


def _coerce(value, target_type, where: str):
    """Check/convert one YAML scalar to the dataclass field's type."""
    if target_type is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _build_section(cls, mapping, section: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        where = f"{section}.{key}"
        if key not in known:
            raise ConfigError(f"unknown key '{where}'")
        if key == "weak_strips":
            kwargs[key] = _build_strips(value, where)
        else:
            kwargs[key] = _coerce(value, known[key].type, where)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:  # section __post_init__ checks
        raise ConfigError(f"section '{section}': {exc}") from exc


def _build_strips(value, where: str) -> tuple[StripSettings, ...]:
    if not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list of strip mappings")
    return tuple(_build_section(StripSettings, item, f"{where}[{k}]") for k, item in enumerate(value))


def load_config(path=None) -> PipelineConfig:
    """Build the configuration from ``path``, from ``$NAVSFM_CONFIG`` when
    no path is given, or from pure defaults when neither is set."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return PipelineConfig()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    sections = {f.name: f for f in fields(PipelineConfig)}
    kwargs = {}
    for name, mapping in data.items():
        if name not in sections:
            raise ConfigError(
                f"unknown configuration section '{name}'; expected one of "
                + ", ".join(sorted(sections))
            )
        kwargs[name] = _build_section(sections[name].type, mapping, name)
    return PipelineConfig(**kwargs)


def apply_overrides(cfg: PipelineConfig, assignments) -> PipelineConfig:
    """Apply ``section.key=value`` strings on top of a configuration."""
    sections = {f.name: f for f in fields(PipelineConfig)}
    for text in assignments:
        if "=" not in text:
            raise ConfigError(f"override {text!r} is not of the form section.key=value")
        dotted, raw = text.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override {text!r} is not of the form section.key=value")
        section, key = parts
        if section not in sections:
            raise ConfigError(f"unknown configuration section '{section}'")
        section_cls = sections[section].type
        known = {f.name: f for f in fields(section_cls)}
        if key not in known:
            raise ConfigError(f"unknown key '{section}.{key}'")
        if key == "weak_strips":
            raise ConfigError("simulate.weak_strips can only be set in the config file")
        value = _parse_override(raw.strip(), known[key].type, f"{section}.{key}")
        try:
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{key: value})})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section '{section}': {exc}") from exc
    return cfg


def _parse_override(raw: str, target_type, where: str):
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if target_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw
