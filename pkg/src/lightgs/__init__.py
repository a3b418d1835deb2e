"""Compact dynamic Gaussian splatting on the CPU: scoring, pruning, pooling and distillation."""
from .compressor import CompressionConfig, compress
from .deformation import DeformationField, Scene, deform_cloud, init_field
from .errors import FormatError, InvalidArgument, InvalidState
from .formats import load_scene, save_scene
from .optimizer import OptimConfig, distill
from .renderer import render, render_dynamic
from .scene import Camera, GaussianCloud, SceneDataset

__version__ = "0.1.0"

__all__ = [
    "Camera", "CompressionConfig", "DeformationField", "FormatError", "GaussianCloud",
    "InvalidArgument", "InvalidState", "OptimConfig", "Scene", "SceneDataset", "compress",
    "deform_cloud", "distill", "init_field", "load_scene", "render", "render_dynamic", "save_scene",
]
