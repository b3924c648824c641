"""Few-step point cloud scene completion by distilling a diffusion teacher."""

__version__ = "0.1.0"
