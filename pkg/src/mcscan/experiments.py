"""The three evaluation protocols, driven entirely by a config object.

E1 measures motion-parameter recovery accuracy over repeated noisy trials,
E2 measures image stabilisation as NCC against an exhale reference with and
without compensation, and E3 runs the full learn / plan / scan / reconstruct
pipeline and scores the recovered tumour against the phantom's ground truth.

Every random draw is keyed by a tuple (master seed, experiment number,
purpose, indices...), so runs are reproducible bit for bit and paired
comparisons (compensation on vs off) share all randomness.  Result files are
one CSV of plot-ready rows per experiment plus a JSON manifest carrying the
config hash, the summary statistics and the sha256 of every written file.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .config import (ExperimentConfig, config_hash, make_calibration,
                     make_ground_truth, make_image_spec, make_phantom,
                     make_robot, make_scan_config, make_scan_region,
                     to_canonical_dict, zero_noise)
from .geometry import RigidTransform, unit
from .motion import FitError, FitNotConverged, aggregate_displacement, learn_motion_model
from .planner import lift_to_poses, plan_zigzag
from .reconstruction import reconstruct_tumour, score_mesh, write_obj, write_stl_ascii
from .servo import run_scan
from .tissue import (MotionGroundTruth, TissuePhantom, observe_grid,
                     surface_point_and_normal)
from .ultrasound import stabilisation_experiment, write_pgm

# purpose codes inside seed tuples; experiment number comes first
_PHI = 1
_OBSERVE = 2
_STAB = 3
_SCAN = 4


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, name: str, cfg: ExperimentConfig,
                    summary: dict, outputs: list[Path]) -> Path:
    from . import __version__
    manifest = {
        "experiment": name,
        "version": __version__,
        "config_sha256": config_hash(cfg),
        "master_seed": cfg.seed,
        "summary": summary,
        "outputs": {str(p.relative_to(out_dir)): _sha256_file(p)
                    for p in outputs},
        "config": to_canonical_dict(cfg),
    }
    path = out_dir / f"{name}_manifest.json"
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def observe_series(phantom: TissuePhantom, gt: MotionGroundTruth, region,
                   n_frames: int, noise_sigma: float, outlier_rate: float,
                   detection_probability: float, grid_shape, seed_prefix
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame tissue displacement vectors from simulated grid tracking.

    Each sample is the negated robust aggregate of (reference - current)
    point offsets, i.e. the displacement of the tissue away from its exhale
    reference, which is the quantity the motion model is defined on.
    """
    times = np.arange(n_frames, dtype=float) / gt.frame_rate
    samples = np.empty((n_frames, 3))
    for i, t in enumerate(times):
        grid = observe_grid(phantom, gt, region, t, noise_sigma, outlier_rate,
                            seed=(*seed_prefix, i), grid_shape=grid_shape,
                            detection_probability=detection_probability)
        samples[i] = -aggregate_displacement(grid)
    return times, samples


def learn_from_scene(phantom: TissuePhantom, gt: MotionGroundTruth,
                     cfg: ExperimentConfig, seed_prefix, region=None):
    """Observation plus model learning with the config's tracking settings."""
    tr = cfg.tracking
    times, samples = observe_series(
        phantom, gt, region if region is not None else tr.learn_region,
        cfg.learning.frames, tr.noise_sigma, tr.outlier_rate,
        tr.detection_probability, tuple(tr.grid), seed_prefix)
    return learn_motion_model(times, samples, n=cfg.learning.n)


def _dwell_probe_pose(phantom: TissuePhantom, xy,
                      heading=(1.0, 0.0, 0.0)) -> RigidTransform:
    """Probe pose resting on the surface above ``xy``, y-axis along heading."""
    point, normal = surface_point_and_normal(phantom, xy)
    z_axis = -normal
    h = np.asarray(heading, dtype=float)
    y_axis = unit(h - (h @ z_axis) * z_axis)
    x_axis = np.cross(y_axis, z_axis)
    rot = np.column_stack([x_axis, y_axis, z_axis])
    return RigidTransform(rot, point)


def run_e1(cfg: ExperimentConfig, out_dir, dump_frames: bool = False) -> dict:
    """Motion-parameter recovery: repeated noisy trials per profile and axis.

    Reports the recovered period (in frames) and amplitude (in mm) per
    trial; fit failures are recorded in the row, never raised.
    ``dump_frames`` is accepted for interface uniformity; no images are
    acquired here.
    """
    del dump_frames
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phantom = make_phantom(cfg.phantom)
    fps = cfg.frame_rate

    header = ["profile", "axis", "trial", "tau_true_frames", "b_true_mm",
              "tau_hat_frames", "b_hat_mm", "tau_err_frames", "b_err_mm",
              "phi_true", "phi_hat", "residual_rms", "converged"]
    rows = []
    summary: dict = {}
    for ip, profile in enumerate(cfg.profiles):
        tau_hats, b_hats = [], []
        for ia, axis_name in enumerate(cfg.e1.axes):
            for trial in range(cfg.e1.trials_per_axis):
                rng = np.random.default_rng((cfg.seed, 1, _PHI, ip, ia, trial))
                phi = float(rng.uniform(0.0, np.pi))
                gt = make_ground_truth(profile, fps, phi, axis=axis_name)
                seed_prefix = (cfg.seed, 1, _OBSERVE, ip, ia, trial)
                try:
                    model, basis, trace, report = learn_from_scene(
                        phantom, gt, cfg, seed_prefix)
                    converged = report.converged
                except FitNotConverged as exc:
                    model, report = exc.last_model, exc.report
                    converged = False
                except FitError:
                    rows.append([profile.name, axis_name, trial,
                                 profile.period_frames, profile.amplitude_mm,
                                 float("nan"), float("nan"), float("nan"),
                                 float("nan"), phi, float("nan"),
                                 float("nan"), 0])
                    continue
                tau_hat = model.tau * fps
                rows.append([profile.name, axis_name, trial,
                             profile.period_frames, profile.amplitude_mm,
                             tau_hat, model.b,
                             tau_hat - profile.period_frames,
                             model.b - profile.amplitude_mm,
                             phi, model.phi, report.residual_rms,
                             int(converged)])
                if converged:
                    tau_hats.append(tau_hat)
                    b_hats.append(model.b)
        tau_arr, b_arr = np.asarray(tau_hats), np.asarray(b_hats)
        summary[profile.name] = {
            "tau_true_frames": profile.period_frames,
            "b_true_mm": profile.amplitude_mm,
            "n_trials": len(cfg.e1.axes) * cfg.e1.trials_per_axis,
            "n_converged": len(tau_hats),
            "tau_mean_frames": float(tau_arr.mean()) if len(tau_arr) else None,
            "tau_std_frames": float(tau_arr.std(ddof=1)) if len(tau_arr) > 1 else None,
            "b_mean_mm": float(b_arr.mean()) if len(b_arr) else None,
            "b_std_mm": float(b_arr.std(ddof=1)) if len(b_arr) > 1 else None,
        }

    csv_path = out_dir / "e1_results.csv"
    _write_csv(csv_path, header, rows)
    _write_manifest(out_dir, "e1", cfg, summary, [csv_path])
    return summary


def run_e2(cfg: ExperimentConfig, out_dir, compensation: bool | None = None,
           dump_frames: bool = False) -> dict:
    """Stabilisation NCC at a dwell point, paired with/without compensation.

    ``compensation=False`` restricts the run to the ablation arm; the default
    runs both arms plus, when configured, an ideal arm learned without noise.
    ``dump_frames`` is accepted for interface uniformity; only the scanning
    experiment produces image dumps.
    """
    del dump_frames
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phantom = make_phantom(cfg.phantom)
    spec = make_image_spec(cfg.imaging)
    fps = cfg.frame_rate
    ideal_cfg = zero_noise(cfg)
    dwell = _dwell_probe_pose(phantom, np.asarray(cfg.phantom.tumour.center)[:2])

    header = ["profile", "variant", "frame", "time", "ncc"]
    rows = []
    summary: dict = {}
    for ip, profile in enumerate(cfg.profiles):
        rng = np.random.default_rng((cfg.seed, 2, _PHI, ip))
        phi = float(rng.uniform(0.0, np.pi))
        gt = make_ground_truth(profile, fps, phi)
        duration = int(round(cfg.e2.duration_cycles * profile.period_frames))

        model, basis, _trace, _report = learn_from_scene(
            phantom, gt, cfg, (cfg.seed, 2, _OBSERVE, ip))
        variants = []
        if compensation in (None, True):
            variants.append(("compensated", True, model, basis, cfg))
        if compensation in (None, False):
            variants.append(("uncompensated", False, None, None, cfg))
        if compensation is None and cfg.e2.include_ideal:
            i_model, i_basis, _, _ = learn_from_scene(
                phantom, gt, ideal_cfg, (cfg.seed, 2, _OBSERVE, ip))
            variants.append(("ideal", True, i_model, i_basis, ideal_cfg))

        summary[profile.name] = {}
        for variant, comp, v_model, v_basis, v_cfg in variants:
            series = stabilisation_experiment(
                phantom, gt, dwell, comp, duration, spec,
                model=v_model, basis=v_basis,
                speckle_sigma=v_cfg.imaging.speckle_sigma,
                seed=(cfg.seed, 2, _STAB, ip))
            for k, (t, v) in enumerate(zip(series.times, series.values)):
                rows.append([profile.name, variant, k, t, v])
            summary[profile.name][variant] = {
                "mean_ncc": series.mean(), "min_ncc": series.min(),
                "frames": duration,
            }
        prof = summary[profile.name]
        if "compensated" in prof and "uncompensated" in prof:
            prof["mean_gap"] = (prof["compensated"]["mean_ncc"]
                                - prof["uncompensated"]["mean_ncc"])

    csv_path = out_dir / "e2_results.csv"
    _write_csv(csv_path, header, rows)
    _write_manifest(out_dir, "e2", cfg, summary, [csv_path])
    return summary


def run_e3(cfg: ExperimentConfig, out_dir, compensation: bool | None = None,
           dump_frames: bool = False) -> dict:
    """Full pipeline: learn, plan, scan, reconstruct, score.

    Runs every configured profile with compensation on and, when the
    ablation is enabled, a paired off arm sharing all seeds.  Meshes are
    exported per arm; reconstruction failures are recorded as infinite
    errors so paired comparisons stay well defined.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh_dir = out_dir / "meshes"
    mesh_dir.mkdir(exist_ok=True)
    phantom = make_phantom(cfg.phantom)
    spec = make_image_spec(cfg.imaging)
    calib = make_calibration(cfg.imaging)
    region = make_scan_region(cfg.planner)
    fps = cfg.frame_rate
    centre = np.asarray(cfg.phantom.tumour.center, dtype=float)
    semi = np.asarray(cfg.phantom.tumour.semi_axes, dtype=float)

    path = plan_zigzag(region, cfg.planner.transducer_width, cfg.planner.step)
    trajectory = lift_to_poses(path, phantom, t_m_d=calib.t_m_d)

    header = ["profile", "variant", "completed", "ticks", "frames_captured",
              "rings", "location_error_mm", "diameter_error_mm",
              "volume_mm3", "volume_true_mm3", "measured_diameter_mm",
              "expected_diameter_mm"]
    rows = []
    outputs = []
    summary: dict = {}
    for profile in cfg.e3_profiles():
        ip = list(cfg.profiles).index(cfg.profile(profile.name))
        rng = np.random.default_rng((cfg.seed, 3, _PHI, ip))
        phi = float(rng.uniform(0.0, np.pi))
        gt = make_ground_truth(profile, fps, phi)
        model, basis, _trace, _report = learn_from_scene(
            phantom, gt, cfg, (cfg.seed, 3, _OBSERVE, ip))

        arms = [("compensated", True)]
        if compensation is False:
            arms = [("uncompensated", False)]
        elif compensation is None and cfg.e3.ablation:
            arms.append(("uncompensated", False))

        summary[profile.name] = {}
        for variant, comp in arms:
            scan_cfg = make_scan_config(cfg, comp, (cfg.seed, 3, _SCAN, ip))
            robot = make_robot(cfg.servo, fps)
            log = run_scan(phantom, gt, trajectory, model, basis, robot,
                           calib, scan_cfg, spec)
            entry = {"completed": log.completed, "ticks": log.ticks,
                     "frames_captured": len(log.frames)}
            try:
                mesh = reconstruct_tumour(
                    log.frames, calib, trajectory.sweep_axis,
                    cfg.planner.step, threshold=cfg.imaging.threshold,
                    compensation=comp)
                score = score_mesh(mesh, centre, semi)
                entry.update(score.to_dict())
                entry["rings"] = mesh.n_rings
                stl = mesh_dir / f"{profile.name}_{variant}.stl"
                obj = mesh_dir / f"{profile.name}_{variant}.obj"
                write_stl_ascii(mesh, stl)
                write_obj(mesh, obj)
                outputs.extend([stl, obj])
            except ValueError as exc:
                entry.update({"location_error_mm": float("inf"),
                              "diameter_error_mm": float("inf"),
                              "volume_mm3": float("nan"),
                              "volume_true_mm3": float(
                                  4.0 / 3.0 * np.pi * semi.prod()),
                              "measured_diameter_mm": float("nan"),
                              "expected_diameter_mm": float("nan"),
                              "rings": 0, "failure": str(exc)})
            summary[profile.name][variant] = entry
            rows.append([profile.name, variant, int(entry["completed"]),
                         entry["ticks"], entry["frames_captured"],
                         entry["rings"], entry["location_error_mm"],
                         entry["diameter_error_mm"], entry["volume_mm3"],
                         entry["volume_true_mm3"],
                         entry["measured_diameter_mm"],
                         entry["expected_diameter_mm"]])
            log_path = out_dir / f"e3_{profile.name}_{variant}_log.csv"
            log.to_csv(log_path)
            outputs.append(log_path)
            if dump_frames:
                fdir = out_dir / "frames" / f"{profile.name}_{variant}"
                fdir.mkdir(parents=True, exist_ok=True)
                for cap in log.frames:
                    fp = fdir / f"frame_{cap.tick:06d}.pgm"
                    write_pgm(cap.frame, fp)
                    outputs.append(fp)

    csv_path = out_dir / "e3_results.csv"
    _write_csv(csv_path, header, rows)
    _write_manifest(out_dir, "e3", cfg, summary, [csv_path] + outputs)
    return summary


def run_all(cfg: ExperimentConfig, out_dir, compensation: bool | None = None,
            dump_frames: bool = False) -> dict:
    out_dir = Path(out_dir)
    return {
        "e1": run_e1(cfg, out_dir, dump_frames=dump_frames),
        "e2": run_e2(cfg, out_dir, compensation=compensation,
                     dump_frames=dump_frames),
        "e3": run_e3(cfg, out_dir, compensation=compensation,
                     dump_frames=dump_frames),
    }
