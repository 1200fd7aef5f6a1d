"""Virtual ultrasound: plane-slice imaging of the phantom and image metrics.

The probe frame D sits at the centre of the transducer face: +z points into
the tissue (depth), +x is the lateral array direction and +y the elevational
direction.  The image frame U lives in the plane y=0 of D. Pixel (u, v)
(column, row) has its centre at ``((u + 0.5) * s, (v + 0.5) * s, 0)`` in U
millimetres, columns run laterally and rows run down in depth, and the image
is laterally centred on the probe axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, compose
from .motion import MotionBasis, RespiratoryModel, evaluate_model, exhale_displacement
from .tissue import MotionGroundTruth, TissuePhantom, tissue_pose_at

# rotation of the image frame within the probe frame: image x -> lateral,
# image y (rows, depth) -> probe z
_R_D_U = np.array([[1.0, 0.0, 0.0],
                   [0.0, 0.0, -1.0],
                   [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class ImageSpec:
    """B-mode raster geometry: rows x cols at a square pixel pitch (mm)."""

    height: int = 128
    width: int = 128
    pixel_spacing: float = 0.2

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError("image must be at least 2x2 pixels")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel spacing must be positive")

    @property
    def width_mm(self) -> float:
        return self.width * self.pixel_spacing

    @property
    def depth_mm(self) -> float:
        return self.height * self.pixel_spacing


def image_frame_pose(spec: ImageSpec) -> RigidTransform:
    """Pose of the image frame U in the probe frame D (``T_D_U``)."""
    return RigidTransform(_R_D_U, np.array([-spec.width_mm / 2.0, 0.0, 0.0]))


@dataclass(frozen=True, eq=False)
class UltrasoundFrame:
    """One acquired image with its capture geometry."""

    intensities: np.ndarray        # (H, W) in [0, 1]
    pixel_spacing: float
    transducer_pose: RigidTransform  # pose of D in the camera frame at capture
    timestamp: float = 0.0

    def __post_init__(self):
        img = np.asarray(self.intensities, dtype=float)
        if img.ndim != 2:
            raise ValueError("intensities must be a 2-D array")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "intensities", img)


def acquire(phantom: TissuePhantom, tissue_pose: RigidTransform,
            transducer_pose: RigidTransform, spec: ImageSpec,
            speckle_sigma: float = 0.0, seed=None,
            timestamp: float = 0.0) -> UltrasoundFrame:
    """Render the binary-contrast slice of the phantom seen by the probe.

    Pixels map through the probe pose into the camera frame and then through
    the inverse tissue pose into tissue coordinates, where the ellipsoid
    inside/outside test assigns the two intensity levels.  Optional speckle
    multiplies each pixel by ``1 + sigma * N(0, 1)`` (seeded) and clips to
    [0, 1]; with ``speckle_sigma=0`` the image is deterministic.
    """
    s = spec.pixel_spacing
    u = (np.arange(spec.width) + 0.5) * s
    v = (np.arange(spec.height) + 0.5) * s
    gu, gv = np.meshgrid(u, v)
    pix = np.stack([gu.ravel(), gv.ravel(), np.zeros(gu.size)], axis=1)

    to_tissue = compose(tissue_pose.inverse(),
                        compose(transducer_pose, image_frame_pose(spec)))
    pts = to_tissue.apply(pix)
    inside = phantom.inside_tumour(pts).reshape(spec.height, spec.width)
    img = np.where(inside, phantom.intensity_inside, phantom.intensity_outside)

    if speckle_sigma > 0.0:
        rng = np.random.default_rng(seed)
        img = img * (1.0 + speckle_sigma * rng.standard_normal(img.shape))
        img = np.clip(img, 0.0, 1.0)
    return UltrasoundFrame(img, s, transducer_pose, timestamp)


def ncc_arrays(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalised cross-correlation clamped to [0, 1].

    Two constant images correlate at 1 when they are (numerically) equal and
    0 otherwise; a constant image against a varying one scores 0.
    Anticorrelation is clamped to 0 rather than reported as negative.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.sqrt((da * da).sum()))
    nb = float(np.sqrt((db * db).sum()))
    if na < 1e-12 or nb < 1e-12:
        if na < 1e-12 and nb < 1e-12:
            return 1.0 if abs(float(a.mean() - b.mean())) < 1e-12 else 0.0
        return 0.0
    r = float((da * db).sum()) / (na * nb)
    return float(np.clip(r, 0.0, 1.0))


def ncc(a: UltrasoundFrame, b: UltrasoundFrame) -> float:
    return ncc_arrays(a.intensities, b.intensities)


def exhale_time(model: RespiratoryModel, not_before: float = 0.0) -> float:
    """First frame time at or after ``not_before`` where the model sits at
    its exhale plateau (waveform maximum)."""
    t0 = (model.phi + np.pi / 2.0) * model.tau / np.pi
    if t0 >= not_before - 1e-9:
        k = 0.0
    else:
        k = np.ceil((not_before - t0) / model.tau - 1e-12)
    t = t0 + k * model.tau
    assert abs(evaluate_model(model, t) - model.z0) < 1e-9
    return float(t)


@dataclass(frozen=True, eq=False)
class NccSeries:
    """NCC of each frame in a dwell against the exhale reference frame."""

    times: np.ndarray
    values: np.ndarray
    reference_time: float
    compensation: bool

    def mean(self) -> float:
        return float(self.values.mean())

    def min(self) -> float:
        return float(self.values.min())


def stabilisation_experiment(phantom: TissuePhantom, gt: MotionGroundTruth,
                             dwell_pose: RigidTransform, compensation: bool,
                             duration: int, spec: ImageSpec,
                             model: RespiratoryModel | None = None,
                             basis: MotionBasis | None = None,
                             start_time: float = 0.0,
                             speckle_sigma: float = 0.0,
                             seed: int = 0) -> NccSeries:
    """Hold the probe over one surface point while the tissue breathes.

    The reference frame is captured at the true exhale plateau, where the
    tissue sits at its datum.  With compensation on, the probe pose is
    shifted each frame by the learned model's predicted displacement from
    exhale; with compensation off it stays fixed.  Paired runs that differ
    only in the flag share all seeds.
    """
    if compensation and (model is None or basis is None):
        raise ValueError("compensation requires a learned model and basis")
    if duration < 1:
        raise ValueError("duration must be at least one frame")

    def probe_pose(t: float) -> RigidTransform:
        if not compensation:
            return dwell_pose
        shift = exhale_displacement(model, basis, t)
        return compose(RigidTransform.from_translation(shift), dwell_pose)

    t_ref = exhale_time(gt.model, not_before=start_time)
    reference = acquire(phantom, tissue_pose_at(gt, t_ref), probe_pose(t_ref), spec,
                        speckle_sigma=speckle_sigma, seed=(seed, 0), timestamp=t_ref)

    times = start_time + np.arange(duration, dtype=float) / gt.frame_rate
    values = np.empty(duration)
    for i, t in enumerate(times):
        frame = acquire(phantom, tissue_pose_at(gt, t), probe_pose(t), spec,
                        speckle_sigma=speckle_sigma, seed=(seed, 1 + i), timestamp=t)
        values[i] = ncc_arrays(reference.intensities, frame.intensities)
    return NccSeries(times, values, t_ref, compensation)


def write_pgm(frame: UltrasoundFrame, path) -> None:
    """8-bit binary PGM dump of one frame."""
    img = np.clip(np.rint(frame.intensities * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_raw(frame: UltrasoundFrame, path) -> None:
    """Raw float32 grid (npy) for quantitative inspection."""
    np.save(path, frame.intensities.astype(np.float32))
