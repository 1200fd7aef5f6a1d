"""Tumour reconstruction from captured B-mode frames.

Pipeline: segment each frame's tumour cross-section, backproject the pixel
contour into the camera frame through the probe chain, undo the breathing
displacement the frame was captured under, pick one frame per sweep station,
re-align the contour rings in a common plane basis and stitch them into a
closed triangle mesh whose volume, centroid and principal extent are then
compared against the known ellipsoid.

All contours are resampled to a fixed number of points by angle around
their centroid, which makes ring correspondence trivial during stitching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .geometry import RigidTransform, compose_all
from .servo import CapturedFrame, FrameCalibration
from .planner import KIND_SCAN


@dataclass(frozen=True, eq=False)
class BoundaryContour:
    """Closed tumour boundary in pixel coordinates, ordered by angle.

    ``points`` has shape (M, 2) with columns (u, v) = (column, row) in
    subpixel units. ``regions_detected`` counts the distinct bright regions
    the frame contained before the largest one was kept.
    """

    points: np.ndarray
    frame_timestamp: float
    regions_detected: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise ValueError("contour needs at least 3 (u, v) points")
        object.__setattr__(self, "points", pts)


def polygon_area(points: np.ndarray) -> float:
    """Absolute shoelace area of a closed 2-D polygon (vertices not repeated)."""
    p = np.asarray(points, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _resample_by_angle(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a closed contour to n points at uniform centroid angles.

    Works on (u, v) vertices; interpolates linearly along the polygon where
    the ray at each target angle crosses it. Assumes the contour is
    star-shaped around its centroid, which holds for ellipsoid slices.
    """
    centroid = points.mean(axis=0)
    rel = points - centroid
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    radius = np.hypot(rel[:, 0], rel[:, 1])
    order = np.argsort(ang)
    ang, radius = ang[order], radius[order]
    # wrap for periodic interpolation
    ang_ext = np.concatenate([ang, ang[:1] + 2 * np.pi])
    rad_ext = np.concatenate([radius, radius[:1]])
    targets = -np.pi + 2 * np.pi * np.arange(n) / n
    # shift targets into [ang[0], ang[0] + 2pi)
    shifted = ang[0] + (targets - ang[0]) % (2 * np.pi)
    rad_t = np.interp(shifted, ang_ext, rad_ext)
    out = centroid + np.column_stack([rad_t * np.cos(targets),
                                      rad_t * np.sin(targets)])
    return out


def segment_frame(frame, threshold: float = 0.5, resample_to: int = 64,
                  min_area_px: float = 4.0) -> BoundaryContour | None:
    """Extract the largest bright region's boundary at subpixel precision.

    Returns None when no region of at least ``min_area_px`` exists. The
    marching-squares contour is traced on the raw intensities and then
    resampled to ``resample_to`` points ordered by angle.
    """
    img = frame.intensities
    mask = img > threshold
    if not mask.any():
        return None
    labels = measure.label(mask)
    n_regions = int(labels.max())
    contours = measure.find_contours(img, threshold)
    best = None
    best_area = 0.0
    for c in contours:
        if len(c) < 4 or not np.allclose(c[0], c[-1]):
            continue  # open contour touching the border; skip partial slices
        uv = np.column_stack([c[:-1, 1], c[:-1, 0]])  # (row, col) -> (u, v)
        area = polygon_area(uv)
        if area > best_area:
            best_area = area
            best = uv
    if best is None or best_area < min_area_px:
        return None
    pts = _resample_by_angle(best, resample_to)
    return BoundaryContour(points=pts, frame_timestamp=frame.timestamp,
                           regions_detected=n_regions)


def backproject(contour: BoundaryContour, calib: FrameCalibration,
                marker_pose: RigidTransform) -> np.ndarray:
    """Lift pixel contour points into the camera frame, shape (M, 3).

    Pixel (u, v) maps to ((u + 0.5) s, (v + 0.5) s, 0) in the image frame,
    then through probe and marker: ``marker_pose * T_M_D * T_D_U * p``.
    """
    s = calib.pixel_spacing
    uv = contour.points
    img_pts = np.column_stack([(uv[:, 0] + 0.5) * s,
                               (uv[:, 1] + 0.5) * s,
                               np.zeros(len(uv))])
    cam = compose_all(marker_pose, calib.t_m_d, calib.t_d_u)
    return cam.apply(img_pts)


@dataclass(frozen=True, eq=False)
class AlignedContour:
    """One ring expressed in a shared slice basis.

    ``points3d`` is the (n, 3) ring in the camera frame after motion
    correction; ``station`` is its along-sweep coordinate.
    """

    points3d: np.ndarray
    station: float
    waypoint_index: int


def _plane_basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors spanning the plane orthogonal to the sweep axis."""
    axis = axis / np.linalg.norm(axis)
    helper = np.eye(3)[int(np.argmin(np.abs(axis)))]
    e1 = np.cross(helper, axis)
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def align_contours(rings: list[AlignedContour], axis: np.ndarray,
                   n: int = 64) -> list[AlignedContour]:
    """Re-order every ring's points by angle in one shared plane basis.

    Stitching assumes point k of ring i corresponds to point k of ring
    i+1; sorting all rings by the same angular origin in a common basis
    guarantees that without any nearest-neighbour matching.
    """
    e1, e2 = _plane_basis(np.asarray(axis, dtype=float))
    targets = -np.pi + 2 * np.pi * np.arange(n) / n
    out = []
    for ring in rings:
        pts = ring.points3d
        centroid = pts.mean(axis=0)
        rel = pts - centroid
        ang = np.arctan2(rel @ e2, rel @ e1)
        order = np.argsort(ang)
        ang_s = ang[order]
        pts_s = pts[order]
        # deduplicate identical angles so np.interp sees strict ascent
        keep = np.concatenate([[True], np.diff(ang_s) > 1e-12])
        ang_s, pts_s = ang_s[keep], pts_s[keep]
        ang_ext = np.concatenate([ang_s, ang_s[:1] + 2 * np.pi])
        pts_ext = np.vstack([pts_s, pts_s[:1]])
        shifted = ang_s[0] + (targets - ang_s[0]) % (2 * np.pi)
        cols = [np.interp(shifted, ang_ext, pts_ext[:, k]) for k in range(3)]
        pts_n = np.column_stack(cols)
        out.append(AlignedContour(points3d=pts_n, station=ring.station,
                                  waypoint_index=ring.waypoint_index))
    out.sort(key=lambda r: r.station)
    return out


@dataclass(frozen=True, eq=False)
class TumourMesh:
    """Closed triangle mesh with provenance counters."""

    vertices: np.ndarray   # (V, 3)
    faces: np.ndarray      # (F, 3) int indices, outward orientation not enforced
    n_rings: int
    n_frames_used: int
    n_frames_total: int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        f = np.asarray(self.faces, dtype=int)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if f.min(initial=0) < 0 or f.max(initial=-1) >= len(v):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)


def build_mesh(rings: list[AlignedContour], n_frames_total: int = 0) -> TumourMesh:
    """Stitch aligned rings into a closed surface with fan caps.

    Requires at least two rings with one shared point count. Consecutive
    rings are joined by a triangle strip; the first and last rings are
    closed with fans around their centroids.
    """
    if len(rings) < 2:
        raise ValueError("need at least 2 contour rings to build a mesh")
    counts = {len(r.points3d) for r in rings}
    if len(counts) != 1:
        raise ValueError(f"rings disagree on point count: {sorted(counts)}")
    n = counts.pop()

    vertices = []
    faces = []
    ring_base = []
    for ring in rings:
        ring_base.append(len(vertices))
        vertices.extend(ring.points3d)
    for a, b in zip(ring_base[:-1], ring_base[1:]):
        for k in range(n):
            k2 = (k + 1) % n
            faces.append((a + k, b + k, b + k2))
            faces.append((a + k, b + k2, a + k2))
    first_c = len(vertices)
    vertices.append(np.asarray(rings[0].points3d).mean(axis=0))
    last_c = len(vertices)
    vertices.append(np.asarray(rings[-1].points3d).mean(axis=0))
    a = ring_base[0]
    b = ring_base[-1]
    for k in range(n):
        k2 = (k + 1) % n
        faces.append((first_c, a + k, a + k2))
        faces.append((last_c, b + k2, b + k))
    return TumourMesh(vertices=np.asarray(vertices),
                      faces=np.asarray(faces, dtype=int),
                      n_rings=len(rings),
                      n_frames_used=len(rings),
                      n_frames_total=n_frames_total)


def mesh_is_closed(mesh: TumourMesh) -> bool:
    """Every edge shared by exactly two faces."""
    edges = {}
    for tri in mesh.faces:
        for i in range(3):
            e = tuple(sorted((int(tri[i]), int(tri[(i + 1) % 3]))))
            edges[e] = edges.get(e, 0) + 1
    return all(c == 2 for c in edges.values())


def mesh_volume(mesh: TumourMesh) -> float:
    """Absolute volume by signed tetrahedra against the vertex mean.

    Shifting to the mean keeps the signed sum well-conditioned; the result
    is orientation-independent because only the magnitude is returned.
    """
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    a = v[mesh.faces[:, 0]]
    b = v[mesh.faces[:, 1]]
    c = v[mesh.faces[:, 2]]
    signed = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    return float(abs(signed.sum()))


def mesh_centroid(mesh: TumourMesh) -> np.ndarray:
    """Volume-weighted centroid of the enclosed solid."""
    origin = mesh.vertices.mean(axis=0)
    v = mesh.vertices - origin
    a = v[mesh.faces[:, 0]]
    b = v[mesh.faces[:, 1]]
    c = v[mesh.faces[:, 2]]
    signed = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    total = signed.sum()
    if abs(total) < 1e-12:
        raise ValueError("mesh encloses no volume")
    tet_centroids = (a + b + c) / 4.0   # fourth vertex is the origin
    return origin + (signed[:, None] * tet_centroids).sum(axis=0) / total


def principal_extent(mesh: TumourMesh) -> tuple[float, np.ndarray]:
    """Width of the mesh along its first principal direction.

    Returns (extent, direction); extent is the vertex span projected on the
    leading eigenvector of the vertex covariance.
    """
    v = mesh.vertices
    centred = v - v.mean(axis=0)
    cov = centred.T @ centred / len(v)
    w, vecs = np.linalg.eigh(cov)
    direction = vecs[:, int(np.argmax(w))]
    proj = centred @ direction
    return float(proj.max() - proj.min()), direction


def ellipsoid_support_width(semi_axes: np.ndarray, direction: np.ndarray) -> float:
    """Diameter of an axis-aligned ellipsoid along a unit direction."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    s = np.asarray(semi_axes, dtype=float)
    return 2.0 * float(np.sqrt(np.sum((s * d) ** 2)))


@dataclass(frozen=True)
class ReconstructionScore:
    """Agreement between the mesh and the known ellipsoid."""

    location_error_mm: float
    diameter_error_mm: float
    volume_mm3: float
    volume_true_mm3: float
    measured_diameter_mm: float
    expected_diameter_mm: float
    n_rings: int

    def to_dict(self) -> dict:
        return {
            "location_error_mm": self.location_error_mm,
            "diameter_error_mm": self.diameter_error_mm,
            "volume_mm3": self.volume_mm3,
            "volume_true_mm3": self.volume_true_mm3,
            "measured_diameter_mm": self.measured_diameter_mm,
            "expected_diameter_mm": self.expected_diameter_mm,
            "n_rings": self.n_rings,
        }


def score_mesh(mesh: TumourMesh, centre: np.ndarray,
               semi_axes: np.ndarray) -> ReconstructionScore:
    """Location error of the centroid and diameter error along the mesh's
    own principal direction, compared with the ellipsoid's support width."""
    centroid = mesh_centroid(mesh)
    loc_err = float(np.linalg.norm(centroid - np.asarray(centre, dtype=float)))
    extent, direction = principal_extent(mesh)
    expected = ellipsoid_support_width(semi_axes, direction)
    sa = np.asarray(semi_axes, dtype=float)
    return ReconstructionScore(
        location_error_mm=loc_err,
        diameter_error_mm=float(abs(extent - expected)),
        volume_mm3=mesh_volume(mesh),
        volume_true_mm3=float(4.0 / 3.0 * np.pi * sa.prod()),
        measured_diameter_mm=extent,
        expected_diameter_mm=expected,
        n_rings=mesh.n_rings,
    )


def reconstruct_tumour(frames: list[CapturedFrame], calib: FrameCalibration,
                       sweep_axis: np.ndarray, step: float,
                       threshold: float = 0.5, resample_to: int = 64,
                       compensation: bool = True) -> TumourMesh:
    """Full frame-list to mesh pipeline.

    Keeps scan-line frames only, segments each, backprojects with the
    detected marker pose, removes the breathing displacement predicted at
    capture time when ``compensation`` is set, then keeps the largest
    cross-section per station bucket (bucket width = planner step) before
    aligning and stitching.
    """
    axis = np.asarray(sweep_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    candidates = []
    for cap in frames:
        if cap.kind != KIND_SCAN:
            continue
        contour = segment_frame(cap.frame, threshold=threshold,
                                resample_to=resample_to)
        if contour is None:
            continue
        pts3d = backproject(contour, calib, cap.detected_marker_pose)
        if compensation:
            pts3d = pts3d - cap.predicted_displacement[None, :]
        area = polygon_area(contour.points)
        station = float(pts3d.mean(axis=0) @ axis)
        candidates.append((cap.waypoint_index, station, area, pts3d))
    if not candidates:
        raise ValueError("no tumour cross-sections found in captured frames")

    buckets: dict[int, tuple] = {}
    for wp, station, area, pts3d in candidates:
        key = int(round(station / step))
        if key not in buckets or area > buckets[key][1]:
            buckets[key] = (wp, area, station, pts3d)
    rings = [AlignedContour(points3d=p, station=s, waypoint_index=wp)
             for wp, a, s, p in
             (buckets[k] for k in sorted(buckets))]
    if len(rings) < 2:
        raise ValueError(
            f"only {len(rings)} usable cross-section(s); tumour too small "
            "for the slice spacing or scan did not cross it")
    aligned = align_contours(rings, axis, n=resample_to)
    return build_mesh(aligned, n_frames_total=len(frames))


def write_stl_ascii(mesh: TumourMesh, path) -> None:
    v, f = mesh.vertices, mesh.faces
    with open(path, "w", newline="\n") as fh:
        fh.write("solid tumour\n")
        for tri in f:
            a, b, c = v[tri[0]], v[tri[1]], v[tri[2]]
            n = np.cross(b - a, c - a)
            norm = np.linalg.norm(n)
            n = n / norm if norm > 1e-12 else np.zeros(3)
            fh.write(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
            fh.write("    outer loop\n")
            for p in (a, b, c):
                fh.write(f"      vertex {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
            fh.write("    endloop\n")
            fh.write("  endfacet\n")
        fh.write("endsolid tumour\n")


def write_obj(mesh: TumourMesh, path) -> None:
    with open(path, "w", newline="\n") as fh:
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for tri in mesh.faces:
            fh.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
