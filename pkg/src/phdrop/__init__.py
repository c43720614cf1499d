"""Post-hoc dropout uncertainty for toy radiance fields and Gaussian splats."""

__version__ = "0.1.0"
