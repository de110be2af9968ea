from . import functional
from .layers import (
    Conv2d,
    ConvTranspose2d,
    DepthwiseConv2d,
    Dropout,
    GELU,
    InstanceNorm,
    LayerKind,
    LayerNorm,
    LayerSpec,
    Linear,
    MLPBlock,
    Module,
    MultiHeadAttention,
    PatchEmbed,
    ReLU,
    TransformerBlock,
    Upsample,
    build,
    init_parameters,
)
