"""Desk-scale camera-to-LiDAR contrastive pretraining on synthetic scenes."""

__version__ = "0.1.0"
