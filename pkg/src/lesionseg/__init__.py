"""Lesion segmentation on synthetic sections: autodiff, losses, metrics, training and CLI."""

__version__ = "0.1.0"
