"""Denoising-diffusion machinery for conditional mel-spectrogram generation."""
from .schedule import NoiseSchedule, build_linear_schedule, sigma
from .forward import TrainingBatch, diffuse_step, l1_loss, q_sample
from .sampler import (TrajectorySpec, accelerated_step, build_trajectory, ddpm_step, final_step,
                      sample)
from .denoiser import (AnalyticGaussianDenoiser, GaussianDataSpec, ToyDenoiser, ZeroPredictor,
                       analytic_predict, grad_check, toy_predict, toy_train)

__all__ = [
    "NoiseSchedule", "build_linear_schedule", "sigma",
    "TrainingBatch", "diffuse_step", "l1_loss", "q_sample",
    "TrajectorySpec", "accelerated_step", "build_trajectory", "ddpm_step", "final_step", "sample",
    "AnalyticGaussianDenoiser", "GaussianDataSpec", "ToyDenoiser", "ZeroPredictor",
    "analytic_predict", "grad_check", "toy_predict", "toy_train",
]
