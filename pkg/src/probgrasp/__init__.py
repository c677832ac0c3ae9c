"""Probabilistic PnP grasp-pose estimation from gripper-corner keypoints."""

from .geometry import CameraIntrinsics, GripperModel, Pose
from .pnp import CorrespondenceSet, SolverConfig, multi_start_solve, solve_pnp
from .prob_pnp import MCConfig, amis_sample, kl_loss, kl_loss_grad, l_pred

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CorrespondenceSet",
    "GripperModel",
    "MCConfig",
    "Pose",
    "SolverConfig",
    "amis_sample",
    "kl_loss",
    "kl_loss_grad",
    "l_pred",
    "multi_start_solve",
    "solve_pnp",
]
