# Copyright Contributors to the endosplat project
# SPDX-License-Identifier: Apache-2.0
"""Sparse-view Gaussian splatting reconstruction and MPM tissue simulation."""

from endosplat._core import (
    ArgumentError,
    Camera,
    ConfigError,
    EndosplatError,
    FormatError,
    GaussianCloud,
    InitializationError,
    NotFoundError,
    SceneBundle,
    SimulationFault,
    Simulation,
    StructuralError,
    TrainingDiverged,
    UsageError,
    bench,
    central_poke,
    default_view,
    evaluate,
    farthest_point_sample,
    loss_depth,
    loss_distortion,
    loss_gs,
    loss_tv,
    polar_decompose,
    psnr,
    render,
    ssim,
    synthesize,
    train,
)

__version__ = "0.1.0"
