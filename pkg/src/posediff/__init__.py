"""Camera pose estimation by conditional diffusion with epipolar geometry guidance."""
from .denoiser import (DenoiserConfig, TrainConfig, build_denoiser, load_checkpoint, make_denoise_fn,
                       pivot_normalize, regress_poses, save_checkpoint, train)
from .diffusion import DiffusionSchedule, ddpm_sample, make_schedule, noise_sample
from .evalkit import MetricReport, evaluate, merge_reports, pose_regression_baseline, similarity_align
from .geometry import (Camera, CorrespondenceSet, PoseTuple, fundamental_matrix, project,
                       sampson_error, sampson_gradient)
from .guidance import (GuidanceConfig, guided_ddpm_sample, guided_mean, log_guidance_density,
                       refine_poses)
from .scenegen import SceneRecord, SceneSpec, generate_dataset, generate_scene, with_corruption

__version__ = "0.1.0"

__all__ = [
    "Camera", "CorrespondenceSet", "PoseTuple", "fundamental_matrix", "project", "sampson_error",
    "sampson_gradient", "DiffusionSchedule", "make_schedule", "noise_sample", "ddpm_sample",
    "DenoiserConfig", "TrainConfig", "build_denoiser", "train", "make_denoise_fn", "regress_poses",
    "pivot_normalize", "save_checkpoint", "load_checkpoint",
    "GuidanceConfig", "guided_mean", "guided_ddpm_sample", "log_guidance_density", "refine_poses",
    "MetricReport", "evaluate", "merge_reports", "similarity_align", "pose_regression_baseline",
    "SceneSpec", "SceneRecord", "generate_scene", "generate_dataset", "with_corruption",
]
