"""Minimal numpy neural engine for the segmentation and recurrence networks."""

from .augment import AugmentationConfig, augment
from .checkpoint import ModelCheckpoint, load_checkpoint, load_into, restore_model, save_checkpoint
from .gradcheck import LayerHarness, grad_check, projection_loss
from .layers import (
    BatchNorm,
    Concat,
    Conv,
    Conv2d,
    Conv3d,
    Dense,
    Dropout,
    LayerSpec,
    LeakyReLU,
    MaxPool,
    MaxPool3d,
    Project1x1,
    ReLU,
    ResidualAdd,
    Sigmoid,
    Upsample2x,
)
from .losses import bce, weighted_bce
from .model import Model
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "AugmentationConfig", "BatchNorm", "Concat", "Conv", "Conv2d", "Conv3d", "Dense",
    "Dropout", "LayerHarness", "LayerSpec", "LeakyReLU", "MaxPool", "MaxPool3d", "Model",
    "ModelCheckpoint", "Project1x1", "ReLU", "ResidualAdd", "Sigmoid", "Upsample2x", "adam_step",
    "augment", "bce", "grad_check", "load_checkpoint", "load_into", "projection_loss",
    "restore_model", "save_checkpoint", "weighted_bce",
]
