"""Compressed U-Net fire segmentation: training, pruning, 8-bit quantization and pipelined inference."""

__version__ = "0.1.0"
