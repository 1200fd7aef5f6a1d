"""Motion-compensated autonomous ultrasound scanning, simulated end to end.

The package couples a breathing tissue phantom with a virtual probe-holding
robot: surface tracking feeds a periodic motion model, a zig-zag planner
covers a target region, a visual-servoing loop executes it with feedforward
motion compensation, and the captured slices are stitched back into a tumour
mesh that can be scored against the phantom's ground truth.
"""

__version__ = "0.1.0"

from .geometry import RigidTransform, compose, compose_all
from .motion import (MotionBasis, MotionTrace, RespiratoryModel,
                     evaluate_model, fit_model, learn_motion_model,
                     update_phase)
from .planner import PlanarPath, ScanRegion, lift_to_poses, plan_zigzag
from .tissue import (HeightField, MotionGroundTruth, TissuePhantom,
                     observe_grid)
from .ultrasound import ImageSpec, UltrasoundFrame, acquire, ncc
from .servo import (FrameCalibration, ScanConfig, VirtualRobot,
                    compensation_step, end_effector_target, run_scan,
                    scanning_step)
from .reconstruction import reconstruct_tumour, score_mesh
from .config import ExperimentConfig, default_config, load_config

__all__ = [
    "__version__",
    "RigidTransform", "compose", "compose_all",
    "MotionBasis", "MotionTrace", "RespiratoryModel", "evaluate_model",
    "fit_model", "learn_motion_model", "update_phase",
    "PlanarPath", "ScanRegion", "lift_to_poses", "plan_zigzag",
    "HeightField", "MotionGroundTruth", "TissuePhantom", "observe_grid",
    "ImageSpec", "UltrasoundFrame", "acquire", "ncc",
    "FrameCalibration", "ScanConfig", "VirtualRobot", "compensation_step",
    "end_effector_target", "run_scan", "scanning_step",
    "reconstruct_tumour", "score_mesh",
    "ExperimentConfig", "default_config", "load_config",
]
