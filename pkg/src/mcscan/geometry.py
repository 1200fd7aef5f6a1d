"""Rigid-body transform algebra used throughout the simulator.

Conventions: right-handed frames, rotations stored as 3x3 matrices,
translations in millimetres, angles in radians.  ``T_A_B`` denotes the pose
of frame B expressed in frame A, so ``compose(T_A_B, T_B_C)`` yields
``T_A_C`` and ``T_A_B.apply(p)`` maps B-frame coordinates into frame A.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-9


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=float)


def unit(v) -> np.ndarray:
    """Normalised copy of ``v``; raises on a zero vector."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalise a zero or non-finite vector")
    return v / n


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An SE(3) element: ``x_out = rotation @ x_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal (|R R^T - I| = {err:.3g})")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1 (reflection?)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=float))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map one point (3,) or a stack (N, 3) through the transform."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __repr__(self) -> str:  # keep reprs short in test failures
        t = np.array2string(self.translation, precision=4, suppress_small=True)
        return f"RigidTransform(t={t})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``T_A_C = compose(T_A_B, T_B_C)``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def compose_all(*transforms: RigidTransform) -> RigidTransform:
    out = transforms[0]
    for t in transforms[1:]:
        out = compose(out, t)
    return out


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    a = unit(axis)
    k = skew(a)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Angle of a rotation matrix, in [0, pi]."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_between(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle between two rotations."""
    return rotation_angle(ra.T @ rb)


def rotation_aligning(from_dir, to_dir) -> np.ndarray:
    """Minimal rotation matrix taking ``from_dir`` onto ``to_dir``.

    For antiparallel inputs the rotation axis is ambiguous; the tie is broken
    with the coordinate axis least parallel to the input direction.
    """
    a = unit(from_dir)
    b = unit(to_dir)
    c = float(a @ b)
    if c < -1.0 + 1e-12:
        # 180 degree case: rotate about any axis perpendicular to a.
        k = int(np.argmin(np.abs(a)))
        e = np.zeros(3)
        e[k] = 1.0
        axis = unit(e - (e @ a) * a)
        return rotation_about_axis(axis, np.pi)
    v = np.cross(a, b)
    k = skew(v)
    r = np.eye(3) + k + k @ k / (1.0 + c)
    return _project_to_rotation(r)


def _project_to_rotation(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def orthonormalized(t: RigidTransform) -> RigidTransform:
    """Snap the rotation back onto SO(3); useful after long compose chains."""
    return RigidTransform(_project_to_rotation(t.rotation), t.translation)


def rotation_drift(r: np.ndarray) -> float:
    return float(np.abs(r @ r.T - np.eye(3)).max())


def pose_to_row12(t: RigidTransform) -> list[float]:
    """Flatten to the [R | t] 3x4 layout, row-major, used by CSV exports."""
    m = np.hstack([t.rotation, t.translation.reshape(3, 1)])
    return [float(x) for x in m.reshape(-1)]
