"""Synthetic-CT / synthetic-MR translation with an auxiliary paired MRCAT task.

Modules: ``phantom`` (data), ``datapipe`` (augmentation and batching),
``nets`` (U-Net and PatchGAN), ``objectives`` (losses, routing, LR schedule),
``trainer``, ``metrics`` (FID, KID, DICE, HU-Dif), ``ablation`` and ``cli``.
"""
from .errors import InvalidArgumentError, InvalidConfigError, NonFiniteLossError, NumericError

__version__ = "0.1.0"

__all__ = ["InvalidArgumentError", "InvalidConfigError", "NonFiniteLossError", "NumericError", "__version__"]
