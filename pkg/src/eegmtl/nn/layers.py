"""Layer objects: parameter containers around :mod:`eegmtl.nn.functional`.

Each geometric layer is described by a :class:`LayerSpec` whose
``output_shape`` is the declared shape function; the layer's forward pass is
checked against it in the test suite.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..tensor import Parameter, Tensor
from . import functional as F


class LayerKind(str, enum.Enum):
    CONV2D = "conv2d"
    DEPTHWISE_CONV2D = "depthwise-conv2d"
    TRANSPOSED_CONV = "transposed-conv"
    LAYER_NORM = "layer-norm"
    INSTANCE_NORM = "instance-norm"
    RELU = "relu"
    GELU = "gelu"
    MULTI_HEAD_ATTENTION = "multi-head-attention"
    MLP_BLOCK = "mlp-block"
    DROPOUT = "dropout"
    UPSAMPLE = "upsample"
    EMBEDDING_TABLE = "embedding-table"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    heads: int = 1
    hidden: int = 0
    target: tuple | None = None
    rate: float = 0.0

    @property
    def multiplier(self) -> int:
        return self.out_channels // max(self.in_channels, 1)

    def output_shape(self, in_shape) -> tuple:
        """Shape produced for an (optionally batched) input shape; raises on bad geometry."""
        in_shape = tuple(int(s) for s in in_shape)
        k = self.kind
        if k in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D, LayerKind.TRANSPOSED_CONV):
            *lead, c, h, w = in_shape
            if c != self.in_channels:
                raise ValueError(f"{k.value}: input has {c} channels, spec expects {self.in_channels}")
            if k is LayerKind.DEPTHWISE_CONV2D and self.out_channels % self.in_channels:
                raise ValueError(f"depthwise: {self.out_channels} outputs is not a multiple of {self.in_channels} inputs")
            extent = F.transposed_extent if k is LayerKind.TRANSPOSED_CONV else F.conv_extent
            ho = extent(h, self.kernel[0], self.stride[0], self.padding[0], "height")
            wo = extent(w, self.kernel[1], self.stride[1], self.padding[1], "width")
            return (*lead, self.out_channels, ho, wo)
        if k is LayerKind.UPSAMPLE:
            return in_shape[:-2] + tuple(self.target)
        if k is LayerKind.MULTI_HEAD_ATTENTION and in_shape[-1] % self.heads:
            raise ValueError(f"model width {in_shape[-1]} is not divisible by {self.heads} heads")
        return in_shape


class Module:
    """Minimal parameter container with train/eval switching."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


def _param(shape, init, fan_in=None, dtype=np.float32):
    fill = np.ones if init == "ones" else np.zeros
    return Parameter(fill(shape, dtype=dtype), init=init, fan_in=fan_in)


class Linear(Module):
    def __init__(self, in_features, out_features, dtype=np.float32):
        self.weight = _param((in_features, out_features), "fan_in", in_features, dtype)
        self.bias = _param((out_features,), "zeros", dtype=dtype)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, spec: LayerSpec, dtype=np.float32):
        self.spec = spec
        kh, kw = spec.kernel
        self.weight = _param((spec.out_channels, spec.in_channels, kh, kw), "fan_in", spec.in_channels * kh * kw, dtype)
        self.bias = _param((spec.out_channels,), "zeros", dtype=dtype)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class DepthwiseConv2d(Module):
    def __init__(self, spec: LayerSpec, dtype=np.float32):
        self.spec = spec
        kh, kw = spec.kernel
        self.weight = _param((spec.out_channels, 1, kh, kw), "fan_in", kh * kw, dtype)
        self.bias = _param((spec.out_channels,), "zeros", dtype=dtype)

    def forward(self, x):
        return F.depthwise_conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class ConvTranspose2d(Module):
    def __init__(self, spec: LayerSpec, dtype=np.float32):
        self.spec = spec
        kh, kw = spec.kernel
        # inputs feeding one output position
        fan_in = spec.in_channels * math.ceil(kh / spec.stride[0]) * math.ceil(kw / spec.stride[1])
        self.weight = _param((spec.in_channels, spec.out_channels, kh, kw), "fan_in", fan_in, dtype)
        self.bias = _param((spec.out_channels,), "zeros", dtype=dtype)

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class InstanceNorm(Module):
    def __init__(self, channels, eps=1e-5, affine=True, dtype=np.float32):
        self.eps = eps
        if affine:
            self.weight = _param((channels,), "ones", dtype=dtype)
            self.bias = _param((channels,), "zeros", dtype=dtype)
        else:
            self.weight = self.bias = None

    def forward(self, x):
        return F.instance_norm(x, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.weight = _param((dim,), "ones", dtype=dtype)
        self.bias = _param((dim,), "zeros", dtype=dtype)

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class GELU(Module):
    def forward(self, x):
        return F.gelu(x)


class Dropout(Module):
    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, rng=None, mask=None):
        return F.dropout(x, self.p, self.training, rng, mask)


class Upsample(Module):
    def __init__(self, target):
        self.target = tuple(target)

    def forward(self, x):
        return F.upsample_nearest(x, self.target)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"model width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(dim, dim, dtype)
        self.key = Linear(dim, dim, dtype)
        self.value = Linear(dim, dim, dtype)
        self.out = Linear(dim, dim, dtype)

    def forward(self, x, return_weights=False):
        q, k, v, o = self.query, self.key, self.value, self.out
        return F.multi_head_attention(x, q.weight, q.bias, k.weight, k.bias, v.weight, v.bias,
                                      o.weight, o.bias, self.heads, return_weights)


class MLPBlock(Module):
    def __init__(self, dim, hidden, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, dtype)
        self.fc2 = Linear(hidden, dim, dtype)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, dim, heads, mlp_ratio=4, eps=1e-5, dtype=np.float32):
        self.norm1 = LayerNorm(dim, eps, dtype)
        self.attn = MultiHeadAttention(dim, heads, dtype)
        self.norm2 = LayerNorm(dim, eps, dtype)
        self.mlp = MLPBlock(dim, dim * mlp_ratio, dtype)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(Module):
    """Learned class token and positional table for an ``Hp x Wp`` grid."""

    def __init__(self, dim, grid, dtype=np.float32):
        self.grid = tuple(grid)
        self.cls_token = _param((dim,), "embedding", dtype=dtype)
        self.pos_table = _param((grid[0] * grid[1] + 1, dim), "embedding", dtype=dtype)

    def forward(self, features: Tensor) -> Tensor:
        return F.patchify_embed(features, self.pos_table, self.cls_token)


def build(spec: LayerSpec, dtype=np.float32) -> Module:
    """Instantiate the layer a spec describes."""
    k = spec.kind
    if k is LayerKind.CONV2D:
        return Conv2d(spec, dtype)
    if k is LayerKind.DEPTHWISE_CONV2D:
        return DepthwiseConv2d(spec, dtype)
    if k is LayerKind.TRANSPOSED_CONV:
        return ConvTranspose2d(spec, dtype)
    if k is LayerKind.INSTANCE_NORM:
        return InstanceNorm(spec.in_channels, dtype=dtype)
    if k is LayerKind.LAYER_NORM:
        return LayerNorm(spec.in_channels, dtype=dtype)
    if k is LayerKind.RELU:
        return ReLU()
    if k is LayerKind.GELU:
        return GELU()
    if k is LayerKind.MULTI_HEAD_ATTENTION:
        return MultiHeadAttention(spec.in_channels, spec.heads, dtype)
    if k is LayerKind.MLP_BLOCK:
        return MLPBlock(spec.in_channels, spec.hidden, dtype)
    if k is LayerKind.DROPOUT:
        return Dropout(spec.rate)
    if k is LayerKind.UPSAMPLE:
        return Upsample(spec.target)
    raise ValueError(f"no standalone layer for kind {k.value}")


def init_parameters(module: Module, rng, prefix=""):
    """Draw every parameter from its own named stream so init is layout-independent."""
    for name, p in module.named_parameters(prefix):
        if p.init == "fan_in":
            p.data = rng.child(name).normal(p.shape, 1.0 / math.sqrt(p.fan_in), p.dtype)
        elif p.init == "embedding":
            p.data = rng.child(name).normal(p.shape, 0.02, p.dtype)
        elif p.init == "ones":
            p.data = np.ones(p.shape, p.dtype)
        else:
            p.data = np.zeros(p.shape, p.dtype)
        p.zero_grad()
