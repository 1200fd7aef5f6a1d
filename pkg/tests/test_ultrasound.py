"""Virtual B-mode imaging, image similarity and the dwell experiment."""

import numpy as np
import pytest

from mcscan.geometry import RigidTransform, compose, rot_z
from mcscan.motion import MotionBasis, RespiratoryModel
from mcscan.tissue import HeightField, MotionGroundTruth, TissuePhantom, tissue_pose_at
from mcscan.ultrasound import (ImageSpec, acquire, exhale_time,
                               image_frame_pose, ncc, ncc_arrays,
                               stabilisation_experiment, write_pgm, write_raw)


def sphere_phantom(radius=5.0, depth=-15.0):
    surface = HeightField.flat((-40, 40, -40, 40), 2.0, 0.0)
    return TissuePhantom(surface, np.array([0.0, 0.0, depth]),
                         np.array([radius] * 3))


def probe_on_surface(xy=(0.0, 0.0), heading=(1.0, 0.0)):
    """Probe frame at the surface: +z down into tissue, +y along heading."""
    hx, hy = heading
    y_axis = np.array([hx, hy, 0.0]) / np.hypot(hx, hy)
    z_axis = np.array([0.0, 0.0, -1.0])
    x_axis = np.cross(y_axis, z_axis)
    rot = np.stack([x_axis, y_axis, z_axis], axis=1)
    return RigidTransform(rot, np.array([xy[0], xy[1], 0.0]))


IDENTITY = RigidTransform.identity()


def test_image_frame_pose_geometry():
    spec = ImageSpec(height=128, width=80, pixel_spacing=0.2)
    assert spec.width_mm == pytest.approx(16.0)
    assert spec.depth_mm == pytest.approx(25.6)
    t_d_u = image_frame_pose(spec)
    # image origin sits at the left edge of the transducer face
    assert np.allclose(t_d_u.translation, [-8.0, 0.0, 0.0])
    # image columns run along the lateral axis, rows down into the tissue
    assert np.allclose(t_d_u.rotation @ [1, 0, 0], [1, 0, 0])
    assert np.allclose(t_d_u.rotation @ [0, 1, 0], [0, 0, 1])


def test_sphere_chord_diameters():
    """Each image row cuts the sphere in a chord of width 2*sqrt(r^2 - d^2)."""
    r = 5.0
    ph = sphere_phantom(radius=r, depth=-15.0)
    spec = ImageSpec(height=128, width=128, pixel_spacing=0.2)
    frame = acquire(ph, IDENTITY, probe_on_surface(), spec)
    img = frame.intensities
    s = spec.pixel_spacing
    inside = img > 0.5
    rows = np.nonzero(inside.any(axis=1))[0]
    # vertical extent matches the sphere diameter
    assert rows.size * s == pytest.approx(2 * r, abs=2 * s)
    for v in rows[::6]:
        depth = (v + 0.5) * s            # mm below the surface
        d = abs(depth - 15.0)
        want = 2.0 * np.sqrt(max(r * r - d * d, 0.0))
        got = inside[v].sum() * s
        assert got == pytest.approx(want, abs=2.5 * s)


def test_acquire_equivariance_tissue_vs_probe_shift():
    """Shifting the tissue one way equals shifting the probe the other way."""
    ph = sphere_phantom()
    spec = ImageSpec(height=64, width=64, pixel_spacing=0.4)
    probe = probe_on_surface(xy=(1.0, -2.0), heading=(0.4, 1.0))
    shift = np.array([0.7, -0.3, 1.1])
    moved_tissue = acquire(ph, RigidTransform.from_translation(shift),
                           probe, spec)
    moved_probe = acquire(ph, IDENTITY,
                          compose(RigidTransform.from_translation(-shift), probe),
                          spec)
    assert np.array_equal(moved_tissue.intensities, moved_probe.intensities)


def test_acquire_elevational_invariance():
    """The slice plane is y=0 in the probe frame: translating the probe along
    its elevational axis over a target extruded that way changes nothing,
    translating laterally does.  With heading (1, 0) the elevational axis is
    camera x and the lateral axis camera y."""
    surface = HeightField.flat((-40, 40, -40, 40), 2.0, 0.0)
    ph = TissuePhantom(surface, np.array([0.0, 0.0, -15.0]),
                       np.array([1000.0, 4.0, 4.0]))
    spec = ImageSpec(height=64, width=64, pixel_spacing=0.4)
    probe = probe_on_surface(heading=(1.0, 0.0))
    along_elev = compose(RigidTransform.from_translation([3.0, 0, 0]), probe)
    along_lat = compose(RigidTransform.from_translation([0, 3.0, 0]), probe)
    base = acquire(ph, IDENTITY, probe, spec).intensities
    assert np.array_equal(acquire(ph, IDENTITY, along_elev, spec).intensities,
                          base)
    assert not np.array_equal(acquire(ph, IDENTITY, along_lat, spec).intensities,
                              base)


def test_acquire_speckle_seeded():
    ph = sphere_phantom()
    spec = ImageSpec(height=32, width=32, pixel_spacing=0.8)
    a = acquire(ph, IDENTITY, probe_on_surface(), spec, speckle_sigma=0.1, seed=(3, 1))
    b = acquire(ph, IDENTITY, probe_on_surface(), spec, speckle_sigma=0.1, seed=(3, 1))
    c = acquire(ph, IDENTITY, probe_on_surface(), spec, speckle_sigma=0.1, seed=(3, 2))
    assert np.array_equal(a.intensities, b.intensities)
    assert not np.array_equal(a.intensities, c.intensities)
    assert a.intensities.min() >= 0.0 and a.intensities.max() <= 1.0


def test_frame_rejects_out_of_range():
    from mcscan.ultrasound import UltrasoundFrame

    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        UltrasoundFrame(np.full((4, 4), 1.5), 0.2, IDENTITY)


def test_ncc_properties():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16))
    assert ncc_arrays(a, a) == pytest.approx(1.0)
    assert ncc_arrays(a, 0.3 + 0.5 * a) == pytest.approx(1.0)  # affine invariance
    assert ncc_arrays(a, 1.0 - a) == 0.0                        # clamp at zero
    flat = np.full((16, 16), 0.4)
    assert ncc_arrays(flat, flat) == 1.0
    assert ncc_arrays(flat, np.full((16, 16), 0.6)) == 0.0
    assert ncc_arrays(flat, a) == 0.0
    with pytest.raises(ValueError, match="shapes differ"):
        ncc_arrays(a, a[:8])


def test_ncc_decays_with_target_displacement():
    ph = sphere_phantom()
    spec = ImageSpec(height=64, width=64, pixel_spacing=0.4)
    probe = probe_on_surface()
    ref = acquire(ph, IDENTITY, probe, spec)
    values = []
    for dz in (0.0, 1.0, 2.0, 4.0):
        pose = RigidTransform.from_translation([0.0, 0.0, -dz])
        values.append(ncc(ref, acquire(ph, pose, probe, spec)))
    assert values[0] == pytest.approx(1.0)
    assert all(x > y for x, y in zip(values, values[1:]))


def test_exhale_time_sits_on_plateau():
    model = RespiratoryModel(z0=0.0, b=3.0, tau=3.0, phi=0.8)
    t0 = exhale_time(model)
    assert t0 >= 0.0
    assert abs(-3.0 * np.cos(np.pi * t0 / 3.0 - 0.8) ** 6) < 1e-9
    t1 = exhale_time(model, not_before=t0 + 0.1)
    assert t1 >= t0 + 0.1 - 1e-9
    assert t1 == pytest.approx(t0 + 3.0)


def test_stabilisation_compensation_restores_similarity():
    ph = sphere_phantom()
    spec = ImageSpec(height=64, width=64, pixel_spacing=0.4)
    model = RespiratoryModel(z0=0.0, b=3.0, tau=3.0, phi=0.8)
    gt = MotionGroundTruth(model=model, axis=np.array([0.0, 0.0, 1.0]),
                           frame_rate=25.0)
    basis = MotionBasis(np.eye(3)[[2, 0, 1]], np.array([1.0, 0.0, 0.0]),
                        np.zeros(3))
    probe = probe_on_surface()
    duration = int(2.5 * 3.0 * 25.0)
    off = stabilisation_experiment(ph, gt, probe, False, duration, spec)
    on = stabilisation_experiment(ph, gt, probe, True, duration, spec,
                                  model=model, basis=basis)
    # the learned model equals the truth here, so compensation is exact
    assert on.min() == pytest.approx(1.0)
    assert off.min() < 0.9
    assert on.mean() > off.mean() + 0.05
    assert off.compensation is False and on.compensation is True
    assert on.times.shape == (duration,)
    # frame times advance by the camera frame interval
    assert np.allclose(np.diff(on.times), 1.0 / 25.0)


def test_stabilisation_requires_model_for_compensation():
    ph = sphere_phantom()
    spec = ImageSpec(height=16, width=16, pixel_spacing=1.0)
    gt = MotionGroundTruth(model=RespiratoryModel(0.0, 3.0, 3.0, 0.8),
                           axis=np.array([0.0, 0.0, 1.0]), frame_rate=25.0)
    with pytest.raises(ValueError, match="model"):
        stabilisation_experiment(ph, gt, probe_on_surface(), True, 10, spec)


def test_write_pgm_and_raw(tmp_path):
    ph = sphere_phantom()
    spec = ImageSpec(height=32, width=48, pixel_spacing=0.5)
    frame = acquire(ph, IDENTITY, probe_on_surface(), spec)
    pgm = tmp_path / "f.pgm"
    write_pgm(frame, pgm)
    blob = pgm.read_bytes()
    header = b"P5\n48 32\n255\n"
    assert blob.startswith(header)
    assert len(blob) == len(header) + 32 * 48
    pixels = np.frombuffer(blob[len(header):], dtype=np.uint8).reshape(32, 48)
    assert set(np.unique(pixels)) <= {round(0.1 * 255), round(0.9 * 255)}

    raw = tmp_path / "f.npy"
    write_raw(frame, raw)
    back = np.load(raw)
    assert back.dtype == np.float32
    assert np.allclose(back, frame.intensities, atol=1e-6)


def test_rotated_probe_sees_rotated_slice():
    """A probe rotated about its own axis slices the same plane only when the
    target is rotationally symmetric about that axis."""
    ph = sphere_phantom()
    spec = ImageSpec(height=64, width=64, pixel_spacing=0.4)
    probe = probe_on_surface()
    quarter = compose(probe, RigidTransform(rot_z(np.pi / 2), np.zeros(3)))
    a = acquire(ph, IDENTITY, probe, spec).intensities
    b = acquire(ph, IDENTITY, quarter, spec).intensities
    assert np.array_equal(a, b)
