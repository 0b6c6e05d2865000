"""Neighbor-constrained deformable Gaussian splatting on numpy.

A differentiable tile rasterizer for 3D Gaussians, a grid-plus-MLP
deformation field, the fine-stage losses including the gated neighbor
constraint, a coarse-to-fine trainer, synthetic scene generation, image
metrics, and a toy implementation of multi-view token attention mechanics.
"""
from .camera import CameraView, intrinsics_from_fov, look_at
from .deform import DeformationField, deform_cloud, load_checkpoint, save_checkpoint
from .gaussians import GaussianCloud, read_ply, write_ply
from .losses import LossWeights, build_neighbor_graph, fine_loss, neighbor_loss
from .metrics import MetricReport, psnr, ssim
from .rasterizer import render, render_backward
from .scenegen import MultiViewSequence, SceneConfig, build_scene, make_articulated_scene, make_orbit_rig
from .trainer import TrainConfig, coarse_fit, fit, progressive_fine_fit

__version__ = "0.1.0"

__all__ = [
    "CameraView",
    "DeformationField",
    "GaussianCloud",
    "LossWeights",
    "MetricReport",
    "MultiViewSequence",
    "SceneConfig",
    "TrainConfig",
    "build_neighbor_graph",
    "build_scene",
    "coarse_fit",
    "deform_cloud",
    "fine_loss",
    "fit",
    "intrinsics_from_fov",
    "load_checkpoint",
    "look_at",
    "make_articulated_scene",
    "make_orbit_rig",
    "neighbor_loss",
    "progressive_fine_fit",
    "psnr",
    "read_ply",
    "render",
    "render_backward",
    "save_checkpoint",
    "ssim",
    "write_ply",
]
