"""Boustrophedon planning, surface lifting and coverage accounting."""

import csv

import numpy as np
import pytest

from mcscan.planner import (KIND_SCAN, KIND_TURN, PlanarPath, ScanRegion,
                            coverage_fraction, lift_to_poses, plan_zigzag)
from mcscan.tissue import HeightField, TissuePhantom


def flat_phantom():
    surface = HeightField.flat((-40, 40, -40, 40), 2.0, 0.0)
    return TissuePhantom(surface, np.array([0, 0, -20.0]),
                         np.array([4.0, 5.5, 4.5]))


def scan_lines(path):
    """Sorted across-sweep offsets of the scan lines."""
    mask = path.kind == KIND_SCAN
    along_x = abs(path.sweep_dir[0]) > abs(path.sweep_dir[1])
    across = path.points[mask, 1] if along_x else path.points[mask, 0]
    return np.unique(np.round(across, 9))


def test_default_region_gives_three_lines():
    region = ScanRegion(-12.0, 12.0, -8.0, 8.0)
    path = plan_zigzag(region, transducer_width=16.0, step=0.5)
    assert np.allclose(scan_lines(path), [-8.0, 0.0, 8.0])
    # sweep along the longer (x) side
    assert np.allclose(np.abs(path.sweep_dir), [1.0, 0.0])


def test_narrow_region_degenerates_to_centred_line():
    region = ScanRegion(0.0, 10.0, 0.0, 5.0)
    path = plan_zigzag(region, transducer_width=10.0, step=0.5)
    assert np.allclose(scan_lines(path), [2.5])
    assert np.all(path.kind == KIND_SCAN)


def test_wide_region_line_offsets_include_far_edge():
    region = ScanRegion(0.0, 20.0, 0.0, 10.0)
    path = plan_zigzag(region, transducer_width=10.0, step=0.5)
    assert np.allclose(scan_lines(path), [0.0, 5.0, 10.0])


def test_stations_boundary_inclusive():
    region = ScanRegion(0.0, 10.2, 0.0, 1.0)
    path = plan_zigzag(region, transducer_width=4.0, step=0.5)
    line0 = path.points[(path.kind == KIND_SCAN) & (path.line_index == 0)]
    xs = line0[:, 0]
    assert xs[0] == pytest.approx(0.0)
    # 10.2 is not a multiple of 0.5; the end station is appended exactly
    assert xs[-1] == pytest.approx(10.2)
    assert np.all(np.diff(xs) <= 0.5 + 1e-9)


def test_alternating_direction_and_turn_points():
    region = ScanRegion(-12.0, 12.0, -8.0, 8.0)
    path = plan_zigzag(region, transducer_width=16.0, step=0.5)
    for line in (0, 1, 2):
        sel = (path.kind == KIND_SCAN) & (path.line_index == line)
        xs = path.points[sel, 0]
        expect = np.diff(xs) > 0 if line % 2 == 0 else np.diff(xs) < 0
        assert expect.all()
        h = path.headings[sel]
        want = [1.0, 0.0] if line % 2 == 0 else [-1.0, 0.0]
        assert np.allclose(h, want)
    turns = path.kind == KIND_TURN
    assert turns.any()
    # connectors travel across the sweep at the region edge reached last
    tp = path.points[turns]
    assert np.allclose(np.abs(tp[:, 0]), 12.0)
    gaps = np.linalg.norm(np.diff(path.points, axis=0), axis=1)
    assert gaps.max() <= path.step + 1e-9


def test_start_corner_selection():
    region = ScanRegion(0.0, 20.0, 0.0, 10.0, start_corner="x1y1")
    path = plan_zigzag(region, transducer_width=10.0, step=0.5)
    assert np.allclose(path.points[0], [20.0, 10.0])
    assert np.allclose(path.sweep_dir, [-1.0, 0.0])
    default = plan_zigzag(ScanRegion(0.0, 20.0, 0.0, 10.0), 10.0, 0.5)
    assert np.allclose(default.points[0], [0.0, 0.0])


def test_coverage_complete_for_planned_regions():
    cases = [
        (ScanRegion(-12.0, 12.0, -8.0, 8.0), 16.0),
        (ScanRegion(0.0, 20.0, 0.0, 10.0), 10.0),
        (ScanRegion(0.0, 10.0, 0.0, 5.0), 10.0),
        (ScanRegion(-7.0, 13.0, 2.0, 19.0), 6.0),
    ]
    for region, width in cases:
        path = plan_zigzag(region, width, step=0.5)
        assert coverage_fraction(path, region, width) >= 0.999


def test_coverage_detects_missing_line():
    region = ScanRegion(-12.0, 12.0, -8.0, 8.0)
    path = plan_zigzag(region, transducer_width=16.0, step=0.5)
    keep = path.line_index == 0
    pruned = PlanarPath(points=path.points[keep],
                        line_index=path.line_index[keep],
                        kind=path.kind[keep], headings=path.headings[keep],
                        sweep_dir=path.sweep_dir,
                        line_spacing=path.line_spacing, step=path.step)
    frac = coverage_fraction(pruned, region, 16.0)
    # the half-width spacing makes adjacent footprints overlap, so only the
    # first line (at the region edge) leaves half the region uncovered
    assert frac == pytest.approx(0.5, abs=0.02)


def test_planar_path_validation():
    with pytest.raises(ValueError, match="positive area"):
        ScanRegion(0.0, 0.0, 0.0, 5.0)
    with pytest.raises(ValueError, match="start_corner"):
        ScanRegion(0.0, 1.0, 0.0, 1.0, start_corner="middle")
    with pytest.raises(ValueError, match="one entry per point"):
        PlanarPath(points=np.zeros((3, 2)), line_index=np.zeros(2, dtype=int),
                   kind=np.zeros(3, dtype=int), headings=np.zeros((3, 2)),
                   sweep_dir=np.array([1.0, 0.0]), line_spacing=1.0, step=0.5)


def test_lift_probe_frames_on_flat_surface():
    ph = flat_phantom()
    region = ScanRegion(-12.0, 12.0, -8.0, 8.0)
    path = plan_zigzag(region, transducer_width=16.0, step=0.5)
    traj = lift_to_poses(path, ph)
    assert len(traj) == len(path.points)
    assert np.allclose(traj.surface_points[:, 2], 0.0)
    assert np.allclose(traj.normals, [0.0, 0.0, 1.0])
    for i in (0, 5, len(traj) - 1):
        rot = traj.marker_poses[i].rotation
        # columns are the probe axes: +z into tissue, +y along travel
        assert np.allclose(rot[:, 2], -traj.normals[i], atol=1e-12)
        assert np.allclose(rot[:, 1], traj.headings[i], atol=1e-12)
        assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0)
        assert np.allclose(traj.marker_poses[i].translation,
                           traj.surface_points[i])


def test_lift_respects_probe_offset_transform():
    from mcscan.geometry import RigidTransform, compose

    ph = flat_phantom()
    path = plan_zigzag(ScanRegion(-5.0, 5.0, -2.0, 2.0), 8.0, 0.5)
    t_m_d = RigidTransform(np.eye(3), np.array([0.0, 0.0, 55.0]))
    traj = lift_to_poses(path, ph, t_m_d=t_m_d)
    probe = compose(traj.marker_poses[0], t_m_d)
    assert np.allclose(probe.translation, traj.surface_points[0], atol=1e-12)
    assert np.allclose(probe.rotation[:, 2], [0.0, 0.0, -1.0], atol=1e-12)
    # the marker itself sits 55 mm above the contact point
    assert traj.marker_poses[0].translation[2] == pytest.approx(55.0)


def test_lift_contact_offset_hovers_above_surface():
    ph = flat_phantom()
    path = plan_zigzag(ScanRegion(-5.0, 5.0, -2.0, 2.0), 8.0, 0.5)
    traj = lift_to_poses(path, ph, contact_offset=2.0)
    assert traj.marker_poses[0].translation[2] == pytest.approx(2.0)


def test_incline_surface_normals_tilt_probe():
    slope = HeightField.from_function(lambda x, y: 0.2 * x, (-30, 30, -30, 30), 2.0)
    ph = TissuePhantom(slope, np.array([0, 0, -20.0]), np.array([3.0, 3.0, 3.0]))
    path = plan_zigzag(ScanRegion(-5.0, 5.0, -2.0, 2.0), 8.0, 0.5)
    traj = lift_to_poses(path, ph)
    want_n = np.array([-0.2, 0.0, 1.0]) / np.hypot(0.2, 1.0)
    assert np.allclose(traj.normals, want_n, atol=1e-9)
    rot = traj.marker_poses[0].rotation
    assert np.allclose(rot[:, 2], -want_n, atol=1e-9)
    # travel heading stays orthogonal to the probe axis
    assert abs(rot[:, 1] @ rot[:, 2]) < 1e-12


def test_trajectory_csv_round_trip(tmp_path):
    ph = flat_phantom()
    path = plan_zigzag(ScanRegion(-5.0, 5.0, -2.0, 2.0), 8.0, 0.5)
    traj = lift_to_poses(path, ph)
    out = tmp_path / "traj.csv"
    traj.to_csv(out)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:7] == ["index", "sx", "sy", "sz", "nx", "ny", "nz"]
    assert len(rows) == len(traj) + 1
    first = np.array([float(v) for v in rows[1][1:4]])
    assert np.allclose(first, traj.surface_points[0], atol=1e-8)
