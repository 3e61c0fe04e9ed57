"""Road surface reconstruction from posed images.

Builds a bird's-eye-view triangle mesh whose vertices carry learned color,
semantic logits, and elevation (an MLP over positionally encoded (x, y)),
optimized jointly with per-camera extrinsic corrections by differentiable
rasterization against posed images.
"""

__version__ = "0.1.0"
