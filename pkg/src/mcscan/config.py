"""Declarative experiment configuration.

One YAML document describes the phantom, imaging geometry, tracking and
learning settings, the planner region, the servo loop and the three
experiment protocols.  Everything is plain data: loading a config never
constructs simulator objects.  The builders at the bottom turn config
sections into the corresponding runtime objects.

Reproducibility contract: the canonical dict (sorted keys, plain floats)
is hashed with sha256 and stamped into every result manifest, so a result
file can always be traced back to the exact configuration that made it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np
import yaml

from .geometry import RigidTransform, rotation_about_axis
from .motion import RespiratoryModel
from .planner import ScanRegion
from .servo import FrameCalibration, ScanConfig, VirtualRobot
from .tissue import HeightField, MotionGroundTruth, TissuePhantom
from .ultrasound import ImageSpec, image_frame_pose

AXIS_VECTORS = {
    "x": (1.0, 0.0, 0.0),
    "y": (0.0, 1.0, 0.0),
    "z": (0.0, 0.0, 1.0),
    "lateral": (0.0, 1.0, 0.0),
    "depth": (0.0, 0.0, 1.0),
    "mixed": (1.0 / np.sqrt(3.0),) * 3,
}


def axis_vector(name: str) -> np.ndarray:
    try:
        return np.asarray(AXIS_VECTORS[name], dtype=float)
    except KeyError:
        raise ValueError(
            f"unknown axis {name!r}; expected one of {sorted(AXIS_VECTORS)}")


@dataclass(frozen=True)
class SurfaceConfig:
    kind: str = "flat"            # flat | incline | dome
    x0: float = -40.0
    y0: float = -40.0
    x1: float = 40.0
    y1: float = 40.0
    spacing: float = 2.0
    height: float = 0.0
    slope_x: float = 0.0          # incline: dz/dx
    slope_y: float = 0.0          # incline: dz/dy
    amplitude: float = 0.0        # dome: peak height above `height`
    sigma: float = 20.0           # dome: Gaussian width


@dataclass(frozen=True)
class TumourConfig:
    center: tuple = (0.0, 0.0, -20.0)
    semi_axes: tuple = (4.0, 5.5, 4.5)


@dataclass(frozen=True)
class PhantomConfig:
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    tumour: TumourConfig = field(default_factory=TumourConfig)
    intensity_inside: float = 0.9
    intensity_outside: float = 0.1


@dataclass(frozen=True)
class ImagingConfig:
    height_px: int = 128
    width_px: int = 80
    pixel_spacing: float = 0.2
    speckle_sigma: float = 0.0
    threshold: float = 0.5


@dataclass(frozen=True)
class TrackingConfig:
    learn_region: tuple = (-30.0, 30.0, -30.0, 30.0)
    online_region: tuple = (16.0, 32.0, -8.0, 8.0)
    grid: tuple = (10, 10)
    noise_sigma: float = 0.8
    outlier_rate: float = 0.05
    detection_probability: float = 0.98


@dataclass(frozen=True)
class LearningConfig:
    frames: int = 320
    n: int = 3


@dataclass(frozen=True)
class PlannerConfig:
    region: tuple = (-12.0, 12.0, -8.0, 8.0)
    transducer_width: float = 16.0
    step: float = 0.5


@dataclass(frozen=True)
class ServoConfig:
    waypoint_tol_mm: float = 0.2
    waypoint_tol_deg: float = 0.5
    marker_noise_mm: float = 0.1
    marker_noise_deg: float = 0.2
    lookahead: int = 1
    single_application: bool = False
    online_update: bool = True
    phase_cap: float = 0.05
    max_linear_speed: float = 50.0
    max_angular_speed: float = 1.0
    latency_ticks: int = 0
    max_ticks: int = 60000
    stall_ticks: int = 2000


@dataclass(frozen=True)
class MotionProfileConfig:
    name: str
    period_frames: float
    amplitude_mm: float
    axis: str

    def tau_seconds(self, frame_rate: float) -> float:
        return self.period_frames / frame_rate


@dataclass(frozen=True)
class E1Config:
    trials_per_axis: int = 3
    axes: tuple = ("x", "y", "z")


@dataclass(frozen=True)
class E2Config:
    duration_cycles: float = 2.5
    include_ideal: bool = True


@dataclass(frozen=True)
class E3Config:
    ablation: bool = True
    profiles: tuple = ()   # empty = all profiles


@dataclass(frozen=True)
class ExperimentConfig:
    frame_rate: float = 25.0
    seed: int = 20260816
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    servo: ServoConfig = field(default_factory=ServoConfig)
    profiles: tuple = (
        MotionProfileConfig("P1", 75.0, 3.0, "lateral"),
        MotionProfileConfig("P2", 125.0, 3.0, "depth"),
        MotionProfileConfig("P3", 125.0, 5.0, "mixed"),
    )
    e1: E1Config = field(default_factory=E1Config)
    e2: E2Config = field(default_factory=E2Config)
    e3: E3Config = field(default_factory=E3Config)

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if not self.profiles:
            raise ValueError("at least one motion profile is required")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate profile names: {names}")
        if self.e1.trials_per_axis < 1:
            raise ValueError("trial count must be >= 1")

    def profile(self, name: str) -> MotionProfileConfig:
        for p in self.profiles:
            if p.name == name:
                return p
        raise KeyError(f"no profile named {name!r}")

    def e3_profiles(self) -> tuple:
        if not self.e3.profiles:
            return self.profiles
        return tuple(self.profile(n) for n in self.e3.profiles)


_SECTION_TYPES = {
    "phantom": PhantomConfig,
    "surface": SurfaceConfig,
    "tumour": TumourConfig,
    "imaging": ImagingConfig,
    "tracking": TrackingConfig,
    "learning": LearningConfig,
    "planner": PlannerConfig,
    "servo": ServoConfig,
    "e1": E1Config,
    "e2": E2Config,
    "e3": E3Config,
}


def _build_section(cls, data):
    if data is None:
        return cls()
    kwargs = {}
    field_map = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(field_map)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    for name, value in data.items():
        if name in _SECTION_TYPES and isinstance(value, dict):
            kwargs[name] = _build_section(_SECTION_TYPES[name], value)
        elif name == "profiles":
            kwargs[name] = tuple(_build_section(MotionProfileConfig, p)
                                 for p in value)
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v
                                 for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return default_config()
    return _build_section(ExperimentConfig, data)


def to_canonical_dict(cfg) -> dict:
    """Recursive plain-data view with tuples turned into lists."""
    def convert(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: convert(getattr(value, f.name))
                    for f in fields(value)}
        if isinstance(value, (tuple, list)):
            return [convert(v) for v in value]
        if isinstance(value, (np.floating, np.integer)):
            return value.item()
        return value
    return convert(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_canonical_dict(cfg), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_canonical_dict(cfg), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# builders


def make_surface(cfg: SurfaceConfig) -> HeightField:
    extent = (cfg.x0, cfg.x1, cfg.y0, cfg.y1)
    if cfg.kind == "flat":
        return HeightField.flat(extent, cfg.spacing, cfg.height)
    if cfg.kind == "incline":
        return HeightField.from_function(
            lambda x, y: cfg.height + cfg.slope_x * x + cfg.slope_y * y,
            extent, cfg.spacing)
    if cfg.kind == "dome":
        return HeightField.from_function(
            lambda x, y: cfg.height + cfg.amplitude * np.exp(
                -(x ** 2 + y ** 2) / (2.0 * cfg.sigma ** 2)),
            extent, cfg.spacing)
    raise ValueError(f"unknown surface kind {cfg.kind!r}")


def make_phantom(cfg: PhantomConfig) -> TissuePhantom:
    return TissuePhantom(
        surface=make_surface(cfg.surface),
        tumour_center=np.asarray(cfg.tumour.center, dtype=float),
        tumour_semi_axes=np.asarray(cfg.tumour.semi_axes, dtype=float),
        intensity_inside=cfg.intensity_inside,
        intensity_outside=cfg.intensity_outside,
    )


def make_ground_truth(profile: MotionProfileConfig, frame_rate: float,
                      phi: float, axis: str | None = None,
                      z0: float = 0.0) -> MotionGroundTruth:
    model = RespiratoryModel(z0=z0, b=profile.amplitude_mm,
                             tau=profile.tau_seconds(frame_rate), phi=phi)
    return MotionGroundTruth(model=model,
                             axis=axis_vector(axis or profile.axis),
                             frame_rate=frame_rate)


def make_image_spec(cfg: ImagingConfig) -> ImageSpec:
    return ImageSpec(height=cfg.height_px, width=cfg.width_px,
                     pixel_spacing=cfg.pixel_spacing)


def make_calibration(cfg: ImagingConfig) -> FrameCalibration:
    spec = make_image_spec(cfg)
    t_e_m = RigidTransform(rotation_about_axis((0.0, 0.0, 1.0), 0.4),
                           np.array([12.0, -6.0, 40.0]))
    t_m_d = RigidTransform(np.eye(3), np.array([0.0, 0.0, 55.0]))
    return FrameCalibration(t_e_m, t_m_d, image_frame_pose(spec),
                            spec.pixel_spacing)


def make_scan_region(cfg: PlannerConfig) -> ScanRegion:
    x0, x1, y0, y1 = cfg.region
    return ScanRegion(x0=x0, x1=x1, y0=y0, y1=y1)


def make_scan_config(cfg: ExperimentConfig, compensation: bool,
                     seed: tuple, start_time: float = 0.0,
                     online_region: tuple | None = None) -> ScanConfig:
    s = cfg.servo
    tr = cfg.tracking
    return ScanConfig(
        compensation=compensation,
        single_application=s.single_application,
        lookahead=s.lookahead,
        waypoint_tol_mm=s.waypoint_tol_mm,
        waypoint_tol_deg=s.waypoint_tol_deg,
        marker_noise_mm=s.marker_noise_mm,
        marker_noise_deg=s.marker_noise_deg,
        online_update=s.online_update,
        phase_cap=s.phase_cap,
        track_region=online_region if online_region is not None
        else tr.online_region,
        track_noise_sigma=tr.noise_sigma,
        track_outlier_rate=tr.outlier_rate,
        track_grid=tuple(tr.grid),
        start_time=start_time,
        max_ticks=s.max_ticks,
        stall_ticks=s.stall_ticks,
        seed=seed,
    )


def make_robot(cfg: ServoConfig, frame_rate: float) -> VirtualRobot:
    return VirtualRobot(
        pose=RigidTransform.identity(),
        max_linear_speed=cfg.max_linear_speed,
        max_angular_speed=cfg.max_angular_speed,
        latency_ticks=cfg.latency_ticks,
        dt=1.0 / frame_rate,
    )


def zero_noise(cfg: ExperimentConfig) -> ExperimentConfig:
    """Copy of the config with every stochastic influence switched off."""
    return replace(
        cfg,
        tracking=replace(cfg.tracking, noise_sigma=0.0, outlier_rate=0.0,
                         detection_probability=1.0),
        servo=replace(cfg.servo, marker_noise_mm=0.0, marker_noise_deg=0.0,
                      max_linear_speed=float("inf"),
                      max_angular_speed=float("inf")),
        imaging=replace(cfg.imaging, speckle_sigma=0.0),
    )
