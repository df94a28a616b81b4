"""Feature-preserving point cloud denoising with a patch encoder-decoder."""

__version__ = "0.1.0"
