"""Few-shot deformable radiance fields driven by expression-conditioned feature warping."""

__version__ = "0.1.0"
