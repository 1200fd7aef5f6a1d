"""Zig-zag coverage planning over the phantom surface.

Sweep lines run along the longer side of a rectangular region and are spaced
half a transducer width apart, so successive footprints overlap by half.
Waypoints are lifted onto the surface with the probe axis antiparallel to
the local normal and the in-plane heading following the travel direction, so
image planes stack along each sweep line.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, compose, pose_to_row12, unit
from .tissue import TissuePhantom, surface_point_and_normal

KIND_SCAN = 0
KIND_TURN = 1


@dataclass(frozen=True)
class ScanRegion:
    """Axis-aligned rectangle in surface coordinates, plus a start corner.

    ``start_corner`` is one of ``x0y0``, ``x1y0``, ``x0y1``, ``x1y1`` or
    ``nearest-origin`` (default), which picks the rectangle corner closest
    to the surface origin.
    """

    x0: float
    x1: float
    y0: float
    y1: float
    start_corner: str = "nearest-origin"

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("scan region must have positive area")
        valid = {"nearest-origin", "x0y0", "x1y0", "x0y1", "x1y1"}
        if self.start_corner not in valid:
            raise ValueError(f"start_corner must be one of {sorted(valid)}")

    def resolved_corner(self) -> str:
        if self.start_corner != "nearest-origin":
            return self.start_corner
        corners = {
            "x0y0": (self.x0, self.y0), "x1y0": (self.x1, self.y0),
            "x0y1": (self.x0, self.y1), "x1y1": (self.x1, self.y1),
        }
        return min(corners, key=lambda k: float(np.hypot(*corners[k])))


@dataclass(frozen=True, eq=False)
class PlanarPath:
    """Ordered 2-D waypoints with per-point line index, kind and heading."""

    points: np.ndarray      # (N, 2)
    line_index: np.ndarray  # (N,)
    kind: np.ndarray        # (N,) KIND_SCAN or KIND_TURN
    headings: np.ndarray    # (N, 2) unit travel direction
    sweep_dir: np.ndarray   # (2,) unit direction of the sweep lines
    line_spacing: float
    step: float

    def __post_init__(self):
        n = self.points.shape[0]
        for name in ("line_index", "kind"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per point")
        if self.headings.shape != (n, 2):
            raise ValueError("headings must be (N, 2)")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def _stations(length: float, step: float) -> np.ndarray:
    s = np.arange(0.0, length + 1e-9, step)
    if length - s[-1] > 1e-9:
        s = np.append(s, length)
    return s


def plan_zigzag(region: ScanRegion, transducer_width: float, step: float = 0.5) -> PlanarPath:
    """Boustrophedon path over ``region`` with lines ``transducer_width/2`` apart.

    The sweep runs along the longer region side.  A region whose short side
    does not exceed the line spacing degenerates to a single centred line.
    Connecting segments between lines are emitted as ``KIND_TURN`` points so
    downstream consumers can exclude them from imaging.
    """
    if transducer_width <= 0 or step <= 0:
        raise ValueError("transducer width and step must be positive")
    spacing = transducer_width / 2.0
    lx = region.x1 - region.x0
    ly = region.y1 - region.y0
    along_x = lx >= ly
    long_len, short_len = (lx, ly) if along_x else (ly, lx)

    if short_len <= spacing + 1e-9:
        offsets = np.array([short_len / 2.0])
    else:
        offsets = np.arange(0.0, short_len + 1e-9, spacing)
    stations = _stations(long_len, step)

    corner = region.resolved_corner()
    flip_long = corner in ("x1y0", "x1y1") if along_x else corner in ("x0y1", "x1y1")
    flip_short = corner in ("x0y1", "x1y1") if along_x else corner in ("x1y0", "x1y1")
    if flip_short:
        offsets = short_len - offsets

    def to_xy(along: np.ndarray, across: float) -> np.ndarray:
        a = long_len - along if flip_long else along
        if along_x:
            return np.stack([region.x0 + a, np.full_like(a, region.y0 + across)], axis=1)
        return np.stack([np.full_like(a, region.x0 + across), region.y0 + a], axis=1)

    sweep_dir = np.array([1.0, 0.0]) if along_x else np.array([0.0, 1.0])
    if flip_long:
        sweep_dir = -sweep_dir

    points, line_idx, kinds, headings = [], [], [], []
    for i, off in enumerate(offsets):
        s = stations if i % 2 == 0 else stations[::-1]
        line_heading = sweep_dir if i % 2 == 0 else -sweep_dir
        xy = to_xy(s, float(off))
        points.append(xy)
        line_idx.append(np.full(len(s), i))
        kinds.append(np.full(len(s), KIND_SCAN))
        headings.append(np.tile(line_heading, (len(s), 1)))
        if i + 1 < len(offsets):
            # connector to the next line, travelling across the sweep
            start = xy[-1]
            end_along = s[-1]
            end = to_xy(np.array([end_along]), float(offsets[i + 1]))[0]
            seg = end - start
            seg_len = float(np.linalg.norm(seg))
            n_steps = max(int(np.ceil(seg_len / step)), 1)
            ts = np.linspace(0.0, 1.0, n_steps + 1)[1:-1]
            if ts.size:
                conn = start + ts[:, None] * seg
                points.append(conn)
                line_idx.append(np.full(len(ts), i + 1))
                kinds.append(np.full(len(ts), KIND_TURN))
                headings.append(np.tile(unit(seg), (len(ts), 1)))

    return PlanarPath(
        points=np.concatenate(points),
        line_index=np.concatenate(line_idx).astype(int),
        kind=np.concatenate(kinds).astype(int),
        headings=np.concatenate(headings),
        sweep_dir=sweep_dir,
        line_spacing=float(spacing),
        step=float(step),
    )


@dataclass(frozen=True, eq=False)
class ScanTrajectory:
    """Planar path lifted onto the surface with desired marker poses."""

    surface_points: np.ndarray              # (N, 3)
    normals: np.ndarray                     # (N, 3) unit, positive z
    marker_poses: tuple[RigidTransform, ...]
    line_index: np.ndarray
    kind: np.ndarray
    headings: np.ndarray                    # (N, 3)
    sweep_axis: np.ndarray                  # (3,)
    step: float

    def __post_init__(self):
        n = self.surface_points.shape[0]
        if len(self.marker_poses) != n:
            raise ValueError("one marker pose per waypoint is required")
        norms = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("normals must be unit vectors")
        planar = np.linalg.norm(np.diff(self.surface_points[:, :2], axis=0), axis=1)
        if planar.size and planar.max() > self.step + 1e-9:
            raise ValueError("consecutive waypoints exceed the step length")

    def __len__(self) -> int:
        return self.surface_points.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "sx", "sy", "sz", "nx", "ny", "nz"]
                            + [f"pose{i}" for i in range(12)])
            for i in range(len(self)):
                row = ([i]
                       + [f"{v:.9g}" for v in self.surface_points[i]]
                       + [f"{v:.9g}" for v in self.normals[i]]
                       + [f"{v:.9g}" for v in pose_to_row12(self.marker_poses[i])])
                writer.writerow(row)


def lift_to_poses(path: PlanarPath, phantom: TissuePhantom,
                  t_m_d: RigidTransform | None = None,
                  contact_offset: float = 0.0) -> ScanTrajectory:
    """Lift planar waypoints onto the phantom surface.

    The probe frame is built with its axis (+z, pointing into the tissue)
    antiparallel to the surface normal and its elevational axis (+y) along
    the travel heading projected into the surface plane.  ``t_m_d`` is the
    pose of the probe frame in the marker frame; the stored waypoint poses
    are the corresponding desired marker poses.
    """
    t_m_d = t_m_d or RigidTransform.identity()
    points, normals = surface_point_and_normal(phantom, path.points)
    d_m_inv = t_m_d.inverse()
    poses = []
    for i in range(points.shape[0]):
        nrm = normals[i]
        z_axis = -nrm
        heading3 = np.array([path.headings[i, 0], path.headings[i, 1], 0.0])
        y_axis = heading3 - (heading3 @ z_axis) * z_axis
        norm = np.linalg.norm(y_axis)
        if norm < 1e-9:
            raise ValueError(f"heading parallel to surface normal at waypoint {i}")
        y_axis /= norm
        x_axis = np.cross(y_axis, z_axis)
        rotation = np.stack([x_axis, y_axis, z_axis], axis=1)
        origin = points[i] + contact_offset * nrm
        transducer_pose = RigidTransform(rotation, origin)
        poses.append(compose(transducer_pose, d_m_inv))
    sweep_axis = unit(np.array([path.sweep_dir[0], path.sweep_dir[1], 0.0]))
    return ScanTrajectory(
        surface_points=points,
        normals=normals,
        marker_poses=tuple(poses),
        line_index=path.line_index.copy(),
        kind=path.kind.copy(),
        headings=np.stack([path.headings[:, 0], path.headings[:, 1],
                           np.zeros(len(path.points))], axis=1),
        sweep_axis=sweep_axis,
        step=path.step,
    )


def coverage_fraction(path: PlanarPath, region: ScanRegion,
                      transducer_width: float, resolution: float = 0.1) -> float:
    """Fraction of the region covered by the swept footprints.

    The footprint of one sweep line is the rectangle of the line segment
    dilated by half the transducer width; the region is rasterised at
    ``resolution`` (cell centres) and tested against every line.
    """
    xs = np.arange(region.x0 + resolution / 2, region.x1, resolution)
    ys = np.arange(region.y0 + resolution / 2, region.y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    covered = np.zeros(len(pts), dtype=bool)
    half = transducer_width / 2.0
    scan_mask = path.kind == KIND_SCAN
    for line in np.unique(path.line_index[scan_mask]):
        sel = scan_mask & (path.line_index == line)
        seg = path.points[sel]
        a, b = seg[0], seg[-1]
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            d = np.linalg.norm(pts - a, axis=1)
        else:
            t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
            d = np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)
        covered |= d <= half + 1e-9
    return float(covered.mean())
