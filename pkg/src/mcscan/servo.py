"""Visual-servoing scan execution with breathing compensation.

Frames: B robot base, E end-effector, C camera, M marker, D probe
(transducer), S a helper frame at the probe contact point oriented like the
camera.  Starred frames are the targets of the current control step.  The
controller runs on a single 25 Hz clock; each tick it

1. reads the (optionally noisy) marker pose from the camera,
2. builds the feedforward compensation transform from the learned model,
3. composes it with the feedback scanning step toward the current waypoint,
4. maps the marker correction to an end-effector target and commands the
   rate-limited virtual robot.

The compensation transform appears both inside the scanning step and again
in the end-effector chain, exactly as the control law is stated; the
``single_application`` flag drops the inner occurrence, which makes an ideal
robot track the tissue exactly instead of lagging one feedforward increment.
Captured frames, poses and model state are logged per tick.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (RigidTransform, compose, compose_all, orthonormalized,
                       pose_to_row12, rotation_about_axis, rotation_between,
                       unit)
from .motion import (MotionBasis, MotionTrace, RespiratoryModel,
                     aggregate_displacement, exhale_displacement,
                     predict_displacement, update_phase)
from .planner import KIND_SCAN, ScanTrajectory
from .tissue import MotionGroundTruth, TissuePhantom, observe_grid, tissue_pose_at
from .ultrasound import ImageSpec, UltrasoundFrame, acquire, image_frame_pose


@dataclass(frozen=True, eq=False)
class FrameCalibration:
    """Constant hand-eye style transforms of the rig.

    ``t_e_m``: marker pose in the end-effector frame.
    ``t_m_d``: probe frame pose in the marker frame.
    ``t_d_u``: image frame pose in the probe frame.
    ``pixel_spacing``: image scale in mm per pixel, matching ``t_d_u``.
    """

    t_e_m: RigidTransform
    t_m_d: RigidTransform
    t_d_u: RigidTransform
    pixel_spacing: float

    def __post_init__(self):
        if self.pixel_spacing <= 0:
            raise ValueError("pixel spacing must be positive")


def default_calibration(spec: ImageSpec) -> FrameCalibration:
    """A plausible rig: marker tilted on the tool flange, probe below it."""
    t_e_m = RigidTransform(rotation_about_axis((0.0, 0.0, 1.0), 0.4),
                           np.array([12.0, -6.0, 40.0]))
    t_m_d = RigidTransform(np.eye(3), np.array([0.0, 0.0, 55.0]))
    return FrameCalibration(t_e_m, t_m_d, image_frame_pose(spec), spec.pixel_spacing)


def compensation_step(model: RespiratoryModel, basis: MotionBasis, t: float,
                      t_m_d: RigidTransform | None = None,
                      t_d_s: RigidTransform | None = None,
                      lookahead: int = 1, dt: float = 0.04) -> RigidTransform:
    """Feedforward marker correction for the next ``lookahead`` frames.

    The predicted tissue shift ``dx = x(t + L*dt) - x(t)`` is applied in the
    camera-oriented surface frame S and conjugated back into the marker
    frame through the probe: ``T_M_D * T_D_S * [I | dx] * (T_M_D * T_D_S)^-1``.
    The conjugation of a pure translation is again a pure translation, so
    the result never rotates the probe.
    """
    t_m_d = t_m_d or RigidTransform.identity()
    t_d_s = t_d_s or RigidTransform.identity()
    dx = (predict_displacement(model, basis, t + lookahead * dt)
          - predict_displacement(model, basis, t))
    if not np.any(dx):
        # static tissue must yield the exact identity, not an epsilon of it
        return RigidTransform.identity()
    m_s = compose(t_m_d, t_d_s)
    return compose_all(m_s, RigidTransform.from_translation(dx), m_s.inverse())


def scanning_step(detected: RigidTransform, desired: RigidTransform,
                  comp: RigidTransform) -> RigidTransform:
    """Relative marker motion toward the desired pose, compensation first:
    ``comp * detected^-1 * desired``."""
    return compose_all(comp, detected.inverse(), desired)


def end_effector_target(t_b_e: RigidTransform, t_e_m: RigidTransform,
                        scan: RigidTransform, comp: RigidTransform) -> RigidTransform:
    """Map the marker-space correction to an end-effector target:
    ``T_B_E * T_E_M * scan * comp * T_E_M^-1``."""
    return compose_all(t_b_e, t_e_m, scan, comp, t_e_m.inverse())


class ScanAborted(RuntimeError):
    """Scan could not make progress; carries the partial log for inspection."""

    def __init__(self, message: str, log: "ScanLog"):
        super().__init__(message)
        self.log = log


@dataclass
class VirtualRobot:
    """Rate-limited positioner for the end-effector pose ``t_b_e``.

    Commands pass through a FIFO latency queue of ``latency_ticks`` entries;
    per tick the executed motion is clamped to the linear and angular speed
    limits.  Infinite limits give an ideal robot that lands on the freshest
    target each tick.
    """

    pose: RigidTransform
    max_linear_speed: float = 50.0     # mm/s
    max_angular_speed: float = 1.0     # rad/s
    latency_ticks: int = 0
    dt: float = 0.04
    _queue: list = field(default_factory=list, repr=False)

    def step(self, target: RigidTransform) -> bool:
        """Advance one tick toward the effective command; True if saturated."""
        self._queue.append(target)
        if len(self._queue) <= self.latency_ticks:
            return False
        effective = self._queue.pop(0)

        saturated = False
        delta_t = effective.translation - self.pose.translation
        dist = float(np.linalg.norm(delta_t))
        max_step = self.max_linear_speed * self.dt
        if np.isfinite(max_step) and dist > max_step:
            delta_t = delta_t * (max_step / dist)
            saturated = True
        rel = self.pose.rotation.T @ effective.rotation
        angle = rotation_between(np.eye(3), rel)
        max_turn = self.max_angular_speed * self.dt
        if np.isfinite(max_turn) and angle > max_turn:
            axis = np.array([rel[2, 1] - rel[1, 2],
                             rel[0, 2] - rel[2, 0],
                             rel[1, 0] - rel[0, 1]])
            if np.linalg.norm(axis) < 1e-12:
                # 180 degree rotation: recover an axis from R + I
                m = rel + np.eye(3)
                axis = m[:, int(np.argmax(np.diag(m)))]
            new_rot = self.pose.rotation @ rotation_about_axis(unit(axis), max_turn)
            saturated = True
        else:
            # Snap to the commanded rotation when it is reachable this tick.
            # Integrating tiny axis-angle steps instead would let the arccos
            # noise floor (~1e-8 rad on a near-identity relative rotation)
            # random-walk the pose over thousands of ticks.
            new_rot = effective.rotation
        new_t = self.pose.translation + delta_t
        # re-project every tick: thousands of composed steps would otherwise
        # drift the rotation past the library's orthonormality tolerance
        self.pose = orthonormalized(RigidTransform(new_rot, new_t))
        return saturated


@dataclass
class ControllerState:
    """Mutable loop state: waypoint cursor and the live model copy."""

    cursor: int
    model: RespiratoryModel
    basis: MotionBasis
    compensation: bool
    tick: int = 0


@dataclass(frozen=True)
class ScanConfig:
    """Knobs of the servo loop; times in ticks of the shared 25 Hz clock."""

    compensation: bool = True
    single_application: bool = False
    lookahead: int = 1
    waypoint_tol_mm: float = 0.2
    waypoint_tol_deg: float = 0.5
    marker_noise_mm: float = 0.0
    marker_noise_deg: float = 0.0
    online_update: bool = True
    phase_cap: float = 0.05
    track_region: tuple | None = None
    track_noise_sigma: float = 0.0
    track_outlier_rate: float = 0.0
    track_grid: tuple[int, int] = (10, 10)
    capture: bool = True
    start_time: float = 0.0
    dwell_ticks: int = 0
    max_ticks: int = 40000
    stall_ticks: int = 4000
    seed: tuple = (0,)


@dataclass(frozen=True, eq=False)
class CapturedFrame:
    """One B-mode capture with everything reconstruction needs."""

    frame: UltrasoundFrame
    waypoint_index: int
    tick: int
    time: float
    detected_marker_pose: RigidTransform
    true_marker_pose: RigidTransform
    predicted_displacement: np.ndarray
    line_index: int
    kind: int


@dataclass(eq=False)
class ScanLog:
    """Per-tick record of the control loop plus captured frames."""

    times: np.ndarray
    commanded: np.ndarray        # (T, 12) end-effector targets, [R|t] rows
    executed: np.ndarray         # (T, 12) marker poses actually reached
    tissue: np.ndarray           # (T, 3) true tissue displacement
    model_params: np.ndarray     # (T, 4) z0, b, tau, phi
    waypoint_index: np.ndarray
    residual: np.ndarray         # (T,) distance of marker from current target
    saturated: np.ndarray
    captured: np.ndarray
    frames: list[CapturedFrame]
    completed: bool
    ticks: int

    def to_csv(self, path) -> None:
        header = (["tick", "time"]
                  + [f"cmd{i}" for i in range(12)]
                  + [f"exe{i}" for i in range(12)]
                  + ["tissue_dx", "tissue_dy", "tissue_dz",
                     "z0", "b", "tau", "phi",
                     "waypoint", "residual", "saturated", "captured"])
        with open(path, "w", newline="\n") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(self.ticks):
                row = ([k, f"{self.times[k]:.9g}"]
                       + [f"{v:.9g}" for v in self.commanded[k]]
                       + [f"{v:.9g}" for v in self.executed[k]]
                       + [f"{v:.9g}" for v in self.tissue[k]]
                       + [f"{v:.9g}" for v in self.model_params[k]]
                       + [int(self.waypoint_index[k]), f"{self.residual[k]:.9g}",
                          int(self.saturated[k]), int(self.captured[k])])
                writer.writerow(row)


def perturb_pose(pose: RigidTransform, sigma_mm: float, sigma_deg: float,
                 rng: np.random.Generator) -> RigidTransform:
    """Detection noise: isotropic Gaussian translation plus a small rotation
    about a random axis with a Gaussian angle."""
    if sigma_mm <= 0.0 and sigma_deg <= 0.0:
        return pose
    t = pose.translation + sigma_mm * rng.standard_normal(3)
    axis_raw = rng.standard_normal(3)
    angle = np.deg2rad(sigma_deg) * rng.standard_normal()
    rot = pose.rotation
    if abs(angle) > 0 and np.linalg.norm(axis_raw) > 1e-12:
        rot = rot @ rotation_about_axis(axis_raw, angle)
    return RigidTransform(rot, t)


def run_scan(phantom: TissuePhantom, gt: MotionGroundTruth,
             trajectory: ScanTrajectory, model: RespiratoryModel,
             basis: MotionBasis, robot: VirtualRobot, calib: FrameCalibration,
             cfg: ScanConfig, image_spec: ImageSpec,
             t_b_c: RigidTransform | None = None) -> ScanLog:
    """Execute a planned trajectory over the breathing phantom.

    Runs single-threaded and fully deterministically: every stochastic event
    derives its seed from ``cfg.seed`` and the tick index, so paired runs
    that branch differently still see identical noise at matching events.
    Raises ``ScanAborted`` when the cursor stops advancing for longer than
    ``cfg.stall_ticks`` or the tick budget runs out.
    """
    t_b_c = t_b_c or RigidTransform.identity()
    t_c_b = t_b_c.inverse()
    n_waypoints = len(trajectory)
    state = ControllerState(0, model, basis, cfg.compensation)
    identity = RigidTransform.identity()
    dt = 1.0 / gt.frame_rate
    robot.dt = dt

    def desired_marker_pose(t: float, cursor: int) -> RigidTransform:
        wp = trajectory.marker_poses[min(cursor, n_waypoints - 1)]
        if not state.compensation:
            return wp
        shift = exhale_displacement(state.model, state.basis, t)
        return compose(RigidTransform.from_translation(shift), wp)

    # place the robot on the first waypoint at the start time
    first = desired_marker_pose(cfg.start_time, 0)
    robot.pose = compose_all(t_b_c, first, calib.t_e_m.inverse())

    times, commanded, executed, tissue_log = [], [], [], []
    model_log, wp_log, residual_log, sat_log, cap_log = [], [], [], [], []
    frames: list[CapturedFrame] = []
    buffer_t: list[float] = []
    buffer_v: list[float] = []

    tol_mm = cfg.waypoint_tol_mm
    tol_rad = np.deg2rad(cfg.waypoint_tol_deg)
    last_progress_tick = 0
    dwell_remaining = cfg.dwell_ticks
    tick = 0
    completed = False

    while tick < cfg.max_ticks:
        t = cfg.start_time + tick * dt
        t_pose = tissue_pose_at(gt, t)
        true_marker = compose_all(t_c_b, robot.pose, calib.t_e_m)
        rng_det = np.random.default_rng((*cfg.seed, 1, tick))
        detected = perturb_pose(true_marker, cfg.marker_noise_mm,
                                cfg.marker_noise_deg, rng_det)

        desired = desired_marker_pose(t, state.cursor)
        residual = float(np.linalg.norm(detected.translation - desired.translation))
        ang_err = rotation_between(detected.rotation, desired.rotation)

        captured = False
        if state.cursor < n_waypoints and residual <= tol_mm and ang_err <= tol_rad:
            if cfg.capture:
                probe_pose = compose(true_marker, calib.t_m_d)
                frame = acquire(phantom, t_pose, probe_pose, image_spec,
                                speckle_sigma=0.0, timestamp=t)
                pred = (exhale_displacement(state.model, state.basis, t)
                        if state.compensation else np.zeros(3))
                frames.append(CapturedFrame(
                    frame=frame, waypoint_index=state.cursor, tick=tick, time=t,
                    detected_marker_pose=detected, true_marker_pose=true_marker,
                    predicted_displacement=pred,
                    line_index=int(trajectory.line_index[state.cursor]),
                    kind=int(trajectory.kind[state.cursor])))
            captured = True
            state.cursor += 1
            last_progress_tick = tick
            desired = desired_marker_pose(t, state.cursor)

        comp = (compensation_step(
                    state.model, state.basis, t, t_m_d=calib.t_m_d,
                    t_d_s=RigidTransform(
                        (detected.rotation @ calib.t_m_d.rotation).T, np.zeros(3)),
                    lookahead=cfg.lookahead, dt=dt)
                if state.compensation else identity)
        inner = identity if cfg.single_application else comp
        scan_rel = scanning_step(detected, desired, inner)
        target = end_effector_target(robot.pose, calib.t_e_m, scan_rel, comp)
        saturated = robot.step(target)

        if state.compensation and cfg.online_update and cfg.track_region is not None:
            grid = observe_grid(phantom, gt, cfg.track_region, t,
                                cfg.track_noise_sigma, cfg.track_outlier_rate,
                                seed=(*cfg.seed, 2, tick), grid_shape=cfg.track_grid)
            sample = -aggregate_displacement(grid)
            buffer_t.append(t)
            buffer_v.append(float(state.basis.project_scalar(sample)))
            horizon = t - 2.2 * state.model.tau
            while buffer_t and buffer_t[0] < horizon:
                buffer_t.pop(0)
                buffer_v.pop(0)
            if buffer_t[-1] - buffer_t[0] >= 2.0 * state.model.tau:
                window = MotionTrace(np.array(buffer_t), np.array(buffer_v))
                state.model = update_phase(state.model, window, cap=cfg.phase_cap)

        times.append(t)
        commanded.append(pose_to_row12(compose_all(t_c_b, target, calib.t_e_m)))
        executed.append(pose_to_row12(compose_all(t_c_b, robot.pose, calib.t_e_m)))
        tissue_log.append(gt.displacement(t))
        m = state.model
        model_log.append([m.z0, m.b, m.tau, m.phi])
        wp_log.append(min(state.cursor, n_waypoints - 1))
        residual_log.append(residual)
        sat_log.append(saturated)
        cap_log.append(captured)
        tick += 1

        if state.cursor >= n_waypoints:
            if dwell_remaining > 0:
                dwell_remaining -= 1
            else:
                completed = True
                break
        if state.cursor < n_waypoints and tick - last_progress_tick > cfg.stall_ticks:
            log = _build_log(times, commanded, executed, tissue_log, model_log,
                             wp_log, residual_log, sat_log, cap_log, frames,
                             False, tick)
            raise ScanAborted(
                f"no waypoint progress for {cfg.stall_ticks} ticks "
                f"(cursor {state.cursor}/{n_waypoints}, residual {residual:.3f} mm)",
                log)

    log = _build_log(times, commanded, executed, tissue_log, model_log, wp_log,
                     residual_log, sat_log, cap_log, frames, completed, tick)
    if not completed:
        raise ScanAborted(
            f"tick budget {cfg.max_ticks} exhausted at waypoint "
            f"{state.cursor}/{n_waypoints}", log)
    return log


def _build_log(times, commanded, executed, tissue_log, model_log, wp_log,
               residual_log, sat_log, cap_log, frames, completed, ticks) -> ScanLog:
    return ScanLog(
        times=np.asarray(times, dtype=float),
        commanded=np.asarray(commanded, dtype=float),
        executed=np.asarray(executed, dtype=float),
        tissue=np.asarray(tissue_log, dtype=float),
        model_params=np.asarray(model_log, dtype=float),
        waypoint_index=np.asarray(wp_log, dtype=int),
        residual=np.asarray(residual_log, dtype=float),
        saturated=np.asarray(sat_log, dtype=bool),
        captured=np.asarray(cap_log, dtype=bool),
        frames=frames,
        completed=completed,
        ticks=ticks,
    )
