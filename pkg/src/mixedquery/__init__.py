"""Mixed learnable/conditional query matching for unified segmentation training."""

__version__ = "0.1.0"
