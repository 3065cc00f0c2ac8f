"""Multi-contrast implicit neural representations for isotropic MTL segmentation."""

__version__ = "0.1.0"
