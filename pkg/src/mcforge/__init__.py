"""mcforge: micrograph segmentation, uncertainty-aware classification, and cataloging."""

__version__ = "0.1.0"
