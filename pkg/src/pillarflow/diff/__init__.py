"""Minimal reverse-mode differentiation for the operators the flow network uses."""
from .adam import AdamState, adam_step
from .checkpoint import decode_pfw, encode_pfw, load_pfw, save_pfw
from .gradcheck import grad_check, grad_check_fn
from .ops import (Add, BatchNorm, BilinearWarp, Concat, Conv2d, Correlation, Dense,
                  FlowL2Loss, LeakyReLU, Scale, ScatterCells, SegmentMax, Slice, Stack,
                  Upsample2x, batch_norm, bilinear_warp, conv2d, correlation, leaky_relu,
                  upsample2x)
from .tape import OpNode, Tape, Var

__all__ = [
    "AdamState", "adam_step", "decode_pfw", "encode_pfw", "load_pfw", "save_pfw",
    "grad_check", "grad_check_fn", "Add", "BatchNorm", "BilinearWarp", "Concat", "Conv2d",
    "Correlation", "Dense", "FlowL2Loss", "LeakyReLU", "Scale", "ScatterCells", "SegmentMax",
    "Slice", "Stack", "Upsample2x", "batch_norm", "bilinear_warp", "conv2d", "correlation",
    "leaky_relu", "upsample2x", "OpNode", "Tape", "Var",
]
