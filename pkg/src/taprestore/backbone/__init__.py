"""Windowed-attention U-Net backbone."""

from .model import (
    ModelConfig,
    RelPosBias,
    RescaleNorm,
    RestorationModel,
    SKFusion,
    TransformerBlock,
    WindowAttention,
    forward,
    param_count,
    rescale_norm,
    sk_fuse,
    soft_reconstruct,
)
from .windows import relative_position_index, shift_mask, window_attention, window_partition, window_reverse

__all__ = [
    "ModelConfig", "RelPosBias", "RescaleNorm", "RestorationModel", "SKFusion", "TransformerBlock",
    "WindowAttention", "forward", "param_count", "rescale_norm", "sk_fuse", "soft_reconstruct",
    "relative_position_index", "shift_mask", "window_attention", "window_partition", "window_reverse",
]
