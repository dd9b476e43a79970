"""Three-model semi-supervised 3-D segmentation with mutual and diagonal hierarchical consistency."""

__version__ = "0.1.0"
