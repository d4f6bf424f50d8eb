"""Spatio-temporal video segmentation on a from-scratch numpy autodiff core.

A per-frame convolutional encoder feeds a stack of acausal dilated temporal
residual layers (SP-TCN); training supervises only the central frame of each
window. The package also ships a synthetic moving-shapes benchmark with exact
optical flow, IoU / temporal-consistency metrics and a CLI.
"""

from .config import DecoderConfig, TrainConfig
from .model import SegmentationModel, receptive_field

__all__ = ["DecoderConfig", "TrainConfig", "SegmentationModel", "receptive_field"]
__version__ = "0.1.0"
