"""Synthetic pose data: body kinematics, 2D fitting, pose sampling, rendering and statistics."""
from .fitting import FitResult, FitWeights, PosePrior, fit_pose_prior, fit_pose_to_2d, fitting_loss
from .generate import GenerateConfig, generate_dataset, generate_samples
from .kinematics import BodyModel, BodyPoseParams, CameraParams, ProjectionError, default_body, \
    forward_kinematics, look_at, project_pinhole, random_camera
from .render import SceneConfig, render_stick_figure
from .sampling import RejectionConfig, RejectionError, build_library, load_library, sample_pose, \
    save_library
from .stats import pose_distribution_stats
