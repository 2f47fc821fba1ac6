"""Dynamic planar Gaussian splatting with a HexPlane deformation field."""
from .deform import DeformationField, FieldConfig, deform_cloud
from .render import RenderBuffers, RenderSettings, rasterize, render
from .scene import CameraView, GaussianCloud

__all__ = [
    "CameraView",
    "DeformationField",
    "FieldConfig",
    "GaussianCloud",
    "RenderBuffers",
    "RenderSettings",
    "deform_cloud",
    "rasterize",
    "render",
]
__version__ = "0.1.0"
