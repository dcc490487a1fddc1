"""Convolution-augmented self-attention on a small numpy autodiff stack."""
from .attention import AttentionConfig, ConvParams, ConvQKV, VARIANTS
from .model import EncoderConfig

__version__ = "0.1.0"
