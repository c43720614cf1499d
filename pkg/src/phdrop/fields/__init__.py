"""Render-function families: an encoded MLP radiance field and a Gaussian-splat rasterizer."""

from .encoding import ConfigError, EncodingConfig, encode_hash, encode_pe, encode_spe, hash_slots
from .mask import DropoutMask, MaskError, n_dropped_for
from .mlp import Layer, MlpFieldParams, init_mlp, mlp_forward, render_ray_nerf
from .rays import Ray, sphere_bounds, stratified_samples, volume_composite
from .splats import SplatFieldParams, init_splats, project_splat, rasterize, render_view_splats

__all__ = [
    "ConfigError", "EncodingConfig", "encode_hash", "encode_pe", "encode_spe", "hash_slots",
    "DropoutMask", "MaskError", "n_dropped_for",
    "Layer", "MlpFieldParams", "init_mlp", "mlp_forward", "render_ray_nerf",
    "Ray", "sphere_bounds", "stratified_samples", "volume_composite",
    "SplatFieldParams", "init_splats", "project_splat", "rasterize", "render_view_splats",
]
