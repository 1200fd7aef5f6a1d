"""Ground-truth tissue world: heightfield phantom, rigid breathing motion,
and the simulated point-tracker observations.

The phantom is authored in the camera frame at the exhale configuration.
Breathing rigidly translates the whole block along a fixed axis, so the
tissue pose at time ``t`` carries translation ``(z(t) - z0) * axis`` and an
identity rotation; at exhale the tissue frame coincides with the camera
frame.  Time units are whatever the model's period uses; the experiment
layer works in seconds and converts frame counts through ``frame_rate``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, unit
from .motion import RespiratoryModel, evaluate_model


@dataclass(frozen=True, eq=False)
class HeightField:
    """Regular height grid ``z = h(x, y)`` over a rectangular extent."""

    x0: float
    y0: float
    spacing: float
    heights: np.ndarray  # shape (ny, nx)

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=float)
        if h.ndim != 2 or h.shape[0] < 2 or h.shape[1] < 2:
            raise ValueError("heightfield needs at least a 2x2 grid")
        if not np.all(np.isfinite(h)):
            raise ValueError("heightfield has non-finite samples")
        if self.spacing <= 0:
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "heights", h)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ny, nx = self.heights.shape
        return (self.x0, self.x0 + (nx - 1) * self.spacing,
                self.y0, self.y0 + (ny - 1) * self.spacing)

    def contains(self, x, y) -> np.ndarray:
        x0, x1, y0, y1 = self.extent
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def interpolate(self, x, y) -> np.ndarray:
        """Bilinear height lookup; inputs must lie inside the extent."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if not np.all(self.contains(x, y)):
            raise ValueError("query point outside heightfield extent")
        ny, nx = self.heights.shape
        fx = np.clip((x - self.x0) / self.spacing, 0.0, nx - 1 - 1e-12)
        fy = np.clip((y - self.y0) / self.spacing, 0.0, ny - 1 - 1e-12)
        ix = fx.astype(int)
        iy = fy.astype(int)
        tx = fx - ix
        ty = fy - iy
        h = self.heights
        return ((1 - tx) * (1 - ty) * h[iy, ix]
                + tx * (1 - ty) * h[iy, ix + 1]
                + (1 - tx) * ty * h[iy + 1, ix]
                + tx * ty * h[iy + 1, ix + 1])

    @classmethod
    def flat(cls, extent, spacing: float, height: float = 0.0) -> "HeightField":
        x0, x1, y0, y1 = extent
        nx = int(round((x1 - x0) / spacing)) + 1
        ny = int(round((y1 - y0) / spacing)) + 1
        return cls(x0, y0, spacing, np.full((ny, nx), float(height)))

    @classmethod
    def from_function(cls, fn, extent, spacing: float) -> "HeightField":
        x0, x1, y0, y1 = extent
        xs = x0 + spacing * np.arange(int(round((x1 - x0) / spacing)) + 1)
        ys = y0 + spacing * np.arange(int(round((y1 - y0) / spacing)) + 1)
        gx, gy = np.meshgrid(xs, ys)
        return cls(x0, y0, spacing, np.asarray(fn(gx, gy), dtype=float))


@dataclass(frozen=True, eq=False)
class TissuePhantom:
    """Heightfield surface with one embedded ellipsoidal inclusion."""

    surface: HeightField
    tumour_center: np.ndarray
    tumour_semi_axes: np.ndarray
    intensity_inside: float = 0.9
    intensity_outside: float = 0.1

    def __post_init__(self):
        c = np.asarray(self.tumour_center, dtype=float).reshape(3)
        s = np.asarray(self.tumour_semi_axes, dtype=float).reshape(3)
        if np.any(s <= 0):
            raise ValueError("tumour semi-axes must be positive")
        for v in (self.intensity_inside, self.intensity_outside):
            if not 0.0 <= v <= 1.0:
                raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "tumour_center", c)
        object.__setattr__(self, "tumour_semi_axes", s)
        self._check_tumour_below_surface()

    def _check_tumour_below_surface(self):
        c, s = self.tumour_center, self.tumour_semi_axes
        x0, x1, y0, y1 = self.surface.extent
        xs = np.linspace(max(x0, c[0] - s[0]), min(x1, c[0] + s[0]), 9)
        ys = np.linspace(max(y0, c[1] - s[1]), min(y1, c[1] + s[1]), 9)
        gx, gy = np.meshgrid(xs, ys)
        if np.any(self.surface.interpolate(gx, gy) <= c[2] + s[2]):
            raise ValueError("tumour must lie strictly below the surface")

    def inside_tumour(self, points: np.ndarray) -> np.ndarray:
        """Boolean inside/outside test for points in the tissue frame."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        q = (p - self.tumour_center) / self.tumour_semi_axes
        return np.einsum("ij,ij->i", q, q) <= 1.0


@dataclass(frozen=True, eq=False)
class MotionGroundTruth:
    """True breathing model, motion axis (unit, camera frame), frame rate."""

    model: RespiratoryModel
    axis: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise ValueError("motion axis must be a unit vector")
        if self.frame_rate <= 0:
            raise ValueError("frame rate must be positive")
        object.__setattr__(self, "axis", a)

    def displacement(self, t) -> np.ndarray:
        """Tissue displacement from the exhale datum at frame ``t``."""
        z = evaluate_model(self.model, t)
        return np.multiply.outer(np.asarray(z) - self.model.z0, self.axis)


def tissue_pose_at(gt: MotionGroundTruth, t: float) -> RigidTransform:
    """Pose of the tissue frame in the camera frame at frame ``t`` (t >= 0)."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("time must be non-negative")
    return RigidTransform(np.eye(3), gt.displacement(float(t)))


@dataclass(frozen=True, eq=False)
class TrackedGrid:
    """One frame of simulated grid tracking.

    ``points_ref`` are the exhale-configuration surface points, ``points_now``
    the observed positions at the query time, and ``consistent`` the
    forward-backward consistency verdict per point (False marks a point the
    tracker rejected).
    """

    points_ref: np.ndarray
    points_now: np.ndarray
    consistent: np.ndarray

    def __post_init__(self):
        ref = np.asarray(self.points_ref, dtype=float)
        now = np.asarray(self.points_now, dtype=float)
        flags = np.asarray(self.consistent, dtype=bool)
        if not (ref.shape == now.shape and ref.ndim == 2 and ref.shape[1] == 3):
            raise ValueError("reference and current points must both be (N, 3)")
        if flags.shape != (ref.shape[0],):
            raise ValueError("one consistency flag per point is required")
        object.__setattr__(self, "points_ref", ref)
        object.__setattr__(self, "points_now", now)
        object.__setattr__(self, "consistent", flags)


def surface_point_and_normal(phantom: TissuePhantom, xy) -> tuple[np.ndarray, np.ndarray]:
    """Surface point and outward (positive-z) unit normal at planar ``xy``.

    The normal comes from central differences of the interpolated surface
    with a step of one grid cell, shrunk where the extent would be left.
    """
    xy = np.asarray(xy, dtype=float)
    single = xy.ndim == 1
    pts = np.atleast_2d(xy)
    field = phantom.surface
    x, y = pts[:, 0], pts[:, 1]
    if not np.all(field.contains(x, y)):
        bad = np.nonzero(~field.contains(x, y))[0].tolist()
        raise ValueError(f"query points outside surface extent at indices {bad}")
    x0, x1, y0, y1 = field.extent
    d = field.spacing
    xp = np.minimum(x + d, x1)
    xm = np.maximum(x - d, x0)
    yp = np.minimum(y + d, y1)
    ym = np.maximum(y - d, y0)
    hx = (field.interpolate(xp, y) - field.interpolate(xm, y)) / (xp - xm)
    hy = (field.interpolate(x, yp) - field.interpolate(x, ym)) / (yp - ym)
    h = field.interpolate(x, y)
    n = np.stack([-hx, -hy, np.ones_like(hx)], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    p = np.stack([x, y, h], axis=1)
    if single:
        return p[0], n[0]
    return p, n


def observe_grid(phantom: TissuePhantom, gt: MotionGroundTruth, region, t: float,
                 noise_sigma: float, outlier_rate: float, seed,
                 grid_shape: tuple[int, int] = (10, 10),
                 detection_probability: float = 1.0) -> TrackedGrid:
    """Simulate one tracked-grid observation of the breathing surface.

    ``region`` is ``(x0, x1, y0, y1)`` in surface coordinates.  Inliers are
    the true displaced points plus isotropic Gaussian noise; a fraction
    ``outlier_rate`` of points additionally jumps by a uniform magnitude in
    ``[5 sigma, 20 sigma]`` and is flagged inconsistent with probability
    ``detection_probability``.  Deterministic given ``seed``; independent
    sub-streams keep the inlier noise identical across different outlier
    settings of the same seed.
    """
    x0, x1, y0, y1 = (float(v) for v in region)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("tracking region is empty")
    nx, ny = grid_shape
    if nx < 2 or ny < 2:
        raise ValueError("tracking grid needs at least 2x2 points")
    gx, gy = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    ref, _ = surface_point_and_normal(phantom, np.stack([gx.ravel(), gy.ravel()], axis=1))
    n = ref.shape[0]

    ss = np.random.SeedSequence(seed)
    rng_noise, rng_mask, rng_jump, rng_detect = (np.random.default_rng(c) for c in ss.spawn(4))

    displaced = ref + gt.displacement(float(t))
    now = displaced + noise_sigma * rng_noise.standard_normal((n, 3))

    is_outlier = rng_mask.random(n) < outlier_rate
    magnitudes = rng_jump.uniform(5.0 * noise_sigma, 20.0 * noise_sigma, n)
    directions = rng_jump.standard_normal((n, 3))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    directions /= norms
    now = now + np.where(is_outlier[:, None], magnitudes[:, None] * directions, 0.0)

    detected = is_outlier & (rng_detect.random(n) < detection_probability)
    return TrackedGrid(ref, now, ~detected)
