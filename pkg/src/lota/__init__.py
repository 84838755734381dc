"""Lossless ternary adaptation for group-wise quantized linear layers."""

from ._accel import BACKEND
from .layers import (
    MLP,
    LoRALinear,
    QLinearTA,
    ZeroOnlyLinear,
    backward_lora,
    backward_ta,
    backward_zero_only,
    forward_base,
    forward_lora,
    forward_ta,
    forward_zero_only,
)
from .merge import load_checkpoint, merge, save_checkpoint
from .optim import SigmaSchedule, TSignState, sgd_step, sigma_at, tsign_step
from .quant import QuantizedLinear, dequantize, pack_ints, quantize, unpack_ints
from .tern import TernaryAdapter, auxiliary, init_adapter, offsets, ternarize

__version__ = "0.1.0"
