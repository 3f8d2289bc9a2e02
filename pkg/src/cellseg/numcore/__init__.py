"""Minimal tensor library: kernels, reverse-mode tape, losses and Adam."""
from .losses import LossParams, dice_loss, focal_loss_heatmap
from .ops import (activation, add, batchnorm2d, bilinear_upsample2x, concat_channels, conv2d,
                  depthwise_conv2d, global_avg_pool, mul, relu, sigmoid, swish)
from .optim import AdamState, PlateauScheduler, adam_step
from .tensor import Tape, Tensor, active_tape, backward

__all__ = [
    "AdamState", "LossParams", "PlateauScheduler", "Tape", "Tensor", "activation", "active_tape",
    "adam_step", "add", "backward", "batchnorm2d", "bilinear_upsample2x", "concat_channels",
    "conv2d", "depthwise_conv2d", "dice_loss", "focal_loss_heatmap", "global_avg_pool", "mul",
    "relu", "sigmoid", "swish",
]
