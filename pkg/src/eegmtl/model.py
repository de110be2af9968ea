"""The multi-task EEG gaze transformer.

Representation: conv stem -> depthwise conv -> class token + positional
embedding -> pre-norm transformer blocks. Heads read the encoded sequence:
the gaze and pupil heads use the class-token row, the reconstruction decoder
uses the patch rows laid back out on their grid.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import data as datafmt
from .nn import functional as F
from .nn.layers import (
    ConvTranspose2d,
    Conv2d,
    DepthwiseConv2d,
    Dropout,
    InstanceNorm,
    LayerKind,
    LayerNorm,
    LayerSpec,
    Linear,
    Module,
    PatchEmbed,
    TransformerBlock,
    Upsample,
    init_parameters,
)
from .rng import RngStream
from .tensor import Tensor, add, as_tensor, make_node, mul, square, tsum

VARIANTS = {
    "base": dict(use_recon=False, use_pupil=False),
    "mtl1": dict(use_recon=True, use_pupil=False),
    "mtl2": dict(use_recon=False, use_pupil=True),
}


@dataclass
class ModelConfig:
    channels: int = 128
    timesteps: int = 500
    stem_filters: int = 256
    embed_dim: int = 768
    patch_grid: tuple = (16, 14)
    stem_kernel: int = 36
    stem_padding: int = 2
    depth_kernel: int = 8
    encoder_layers: int = 12
    encoder_heads: int = 12
    mlp_ratio: int = 4
    dropout_p: float = 0.3
    pred_hidden: int = 768
    alpha_recon: float = 140.0
    alpha_pupil: float = 1.0
    l2_coeff: float = 1e-4
    use_recon: bool = True
    use_pupil: bool = False
    norm_eps: float = 1e-5
    instance_affine: bool = True
    dtype: str = "float32"
    scale_preset: str = "paper"

    def __post_init__(self):
        self.patch_grid = tuple(int(v) for v in self.patch_grid)
        if self.alpha_recon < 0 or self.alpha_pupil < 0 or self.l2_coeff < 0:
            raise ValueError("loss weights and l2 coefficient must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.embed_dim % self.stem_filters:
            raise ValueError(f"embed_dim {self.embed_dim} must be a multiple of stem_filters {self.stem_filters}")
        if self.embed_dim % self.encoder_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.encoder_heads} heads")
        grid = self.derived_grid()
        if grid != self.patch_grid:
            raise ValueError(f"patch_grid {self.patch_grid} disagrees with stem geometry, which yields {grid}")

    # stem and depthwise strides equal their kernel extents
    def stem_spec(self) -> LayerSpec:
        k = self.stem_kernel
        return LayerSpec(LayerKind.CONV2D, 1, self.stem_filters, (1, k), (1, k), (0, self.stem_padding))

    def depthwise_spec(self) -> LayerSpec:
        k = self.depth_kernel
        return LayerSpec(LayerKind.DEPTHWISE_CONV2D, self.stem_filters, self.embed_dim, (k, 1), (k, 1), (0, 0))

    def spatial_deconv_spec(self) -> LayerSpec:
        k = self.stem_kernel
        return LayerSpec(LayerKind.TRANSPOSED_CONV, self.embed_dim, self.stem_filters, (1, k), (1, k), (0, self.stem_padding))

    def temporal_deconv_spec(self) -> LayerSpec:
        k = self.depth_kernel
        return LayerSpec(LayerKind.TRANSPOSED_CONV, self.stem_filters, 1, (k, 1), (k, 1), (0, 0))

    def derived_grid(self) -> tuple:
        stem = self.stem_spec().output_shape((1, self.channels, self.timesteps))
        deep = self.depthwise_spec().output_shape(stem)
        return tuple(deep[1:])

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return cls(**{"scale_preset": "paper", **overrides})

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(channels=8, timesteps=64, stem_filters=16, embed_dim=32, patch_grid=(2, 4),
                    stem_kernel=16, stem_padding=0, depth_kernel=4, encoder_layers=2,
                    encoder_heads=2, pred_hidden=32, scale_preset="desk")
        return cls(**{**base, **overrides})

    @classmethod
    def preset(cls, name, **overrides) -> "ModelConfig":
        if name not in ("paper", "desk"):
            raise ValueError(f"unknown preset {name!r}; choose 'paper' or 'desk'")
        return getattr(cls, name)(**overrides)

    def with_variant(self, variant) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return dataclasses.replace(self, **VARIANTS[variant])

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_grid"] = list(self.patch_grid)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelOutput:
    gaze_pred: Tensor
    recon: Tensor | None = None
    pupil_pred: Tensor | None = None
    losses: dict = field(default_factory=dict)

    def loss_values(self) -> dict:
        return {k: v.item() for k, v in self.losses.items()}


class Encoder(Module):
    """Representation module; output row 0 is the class-token representation."""

    def __init__(self, cfg: ModelConfig):
        dt = cfg.np_dtype
        self.stem = Conv2d(cfg.stem_spec(), dt)
        self.depthwise = DepthwiseConv2d(cfg.depthwise_spec(), dt)
        self.embed = PatchEmbed(cfg.embed_dim, cfg.patch_grid, dt)
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.encoder_heads, cfg.mlp_ratio, cfg.norm_eps, dt)
                       for _ in range(cfg.encoder_layers)]
        self.norm = LayerNorm(cfg.embed_dim, cfg.norm_eps, dt)

    def forward(self, x):
        h = self.embed(self.depthwise(self.stem(x)))
        for block in self.blocks:
            h = block(h)
        return self.norm(h)


class RegressionHead(Module):
    """FC -> dropout -> FC on the class-token row."""

    def __init__(self, dim, hidden, out, p, dtype):
        self.fc1 = Linear(dim, hidden, dtype)
        self.dropout = Dropout(p)
        self.fc2 = Linear(hidden, out, dtype)

    def forward(self, cls_row, rng=None):
        return self.fc2(self.dropout(self.fc1(cls_row), rng))


class Decoder(Module):
    """Spatial deconv block, temporal deconv block, then resize to the input grid."""

    def __init__(self, cfg: ModelConfig):
        dt = cfg.np_dtype
        self.grid = cfg.patch_grid
        self.spatial = ConvTranspose2d(cfg.spatial_deconv_spec(), dt)
        self.spatial_norm = InstanceNorm(cfg.stem_filters, cfg.norm_eps, cfg.instance_affine, dt)
        self.temporal = ConvTranspose2d(cfg.temporal_deconv_spec(), dt)
        self.temporal_norm = InstanceNorm(1, cfg.norm_eps, cfg.instance_affine, dt)
        self.upsample = Upsample((cfg.channels, cfg.timesteps))

    def forward(self, patch_rows):
        grid = F.depatchify(patch_rows, self.grid)
        h = F.relu(self.spatial_norm(self.spatial(grid)))
        h = F.relu(self.temporal_norm(self.temporal(h)))
        return self.upsample(h)


class MTLTransformer(Module):
    """Gaze regressor with optional reconstruction and pupil-size heads.

    ``gaze_offset``/``gaze_scale`` are fixed (non-trainable) buffers mapping the
    head's output to millimetres: ``pred = head * scale + offset``. They default
    to the identity and are set from training-split statistics by the trainer.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.encoder = Encoder(cfg)
        self.gaze_head = RegressionHead(cfg.embed_dim, cfg.pred_hidden, 2, cfg.dropout_p, dt)
        self.decoder = Decoder(cfg) if cfg.use_recon else None
        self.pupil_head = RegressionHead(cfg.embed_dim, cfg.pred_hidden, 1, cfg.dropout_p, dt) if cfg.use_pupil else None
        self.gaze_offset = np.zeros(2, dtype=dt)
        self.gaze_scale = np.ones(2, dtype=dt)
        for name, p in self.named_parameters():
            p.name = name
        self.seed = seed
        init_parameters(self, RngStream(seed, ("init",)))

    # -- parameter groups ---------------------------------------------------
    def main_parameters(self) -> dict:
        """Representation + gaze head: the parameters the L2 term covers."""
        return {k: v for k, v in self.named_parameters() if k.startswith(("encoder.", "gaze_head."))}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def buffers(self) -> dict:
        return {"buffers.gaze_offset": self.gaze_offset, "buffers.gaze_scale": self.gaze_scale}

    def set_target_stats(self, offset, scale):
        self.gaze_offset = np.asarray(offset, dtype=self.cfg.np_dtype).reshape(2)
        self.gaze_scale = np.asarray(scale, dtype=self.cfg.np_dtype).reshape(2)

    # -- forward pieces --------------------------------------------------------
    def _check_input(self, x):
        x = as_tensor(x)
        want = (1, self.cfg.channels, self.cfg.timesteps)
        if x.shape[-3:] != want or x.ndim not in (3, 4):
            raise ValueError(f"input shape {x.shape} does not match model geometry {want} (optionally batched)")
        if x.dtype != self.cfg.np_dtype:
            x = Tensor(x.data.astype(self.cfg.np_dtype))
        return x

    def represent(self, x) -> Tensor:
        return self.encoder(self._check_input(x))

    def predict_gaze(self, seq, rng=None) -> Tensor:
        raw = self.gaze_head(seq[..., 0, :], _sub(rng, "gaze_head.dropout"))
        if not (np.all(self.gaze_scale == 1) and np.all(self.gaze_offset == 0)):
            raw = _affine(raw, self.gaze_scale, self.gaze_offset)
        return raw

    def predict_pupil(self, seq, rng=None) -> Tensor:
        if self.pupil_head is None:
            raise ValueError("pupil head is disabled (enable use_pupil / variant mtl2)")
        return self.pupil_head(seq[..., 0, :], _sub(rng, "pupil_head.dropout"))

    def reconstruct(self, seq) -> Tensor:
        if self.decoder is None:
            raise ValueError("reconstruction head is disabled (enable use_recon / variant mtl1)")
        batched = seq.ndim == 3
        rows = seq[:, 1:, :] if batched else seq[1:, :].reshape(1, self.cfg.num_patches, -1)
        out = self.decoder(rows)
        return out if batched else out.reshape(out.shape[1:])

    def forward(self, x, rng=None) -> ModelOutput:
        seq = self.represent(x)
        return ModelOutput(
            gaze_pred=self.predict_gaze(seq, rng),
            recon=self.reconstruct(seq) if self.decoder is not None else None,
            pupil_pred=self.predict_pupil(seq, rng) if self.pupil_head is not None else None,
        )

    def l2_term(self) -> Tensor:
        total = None
        for p in self.main_parameters().values():
            s = tsum(square(p))
            total = s if total is None else add(total, s)
        return total

    def total_loss(self, x, gaze, pupil=None, rng=None) -> ModelOutput:
        """Weighted multi-task objective.

        ``total = main + alpha_recon * recon + alpha_pupil * pupil + l2_coeff * ||theta||^2``
        where ``theta`` is the representation and gaze-head parameters. Disabled
        heads contribute a constant zero component.
        """
        cfg = self.cfg
        x = self._check_input(x)
        out = self.forward(x, rng)
        dt = cfg.np_dtype
        zero = Tensor(np.zeros((), dtype=dt))
        main = F.mse_loss(out.gaze_pred, np.asarray(gaze, dtype=dt).reshape(out.gaze_pred.shape))
        recon = F.mse_loss(out.recon, x) if out.recon is not None else zero
        if out.pupil_pred is not None:
            if pupil is None:
                raise ValueError("pupil head enabled but no pupil target given (dataset lacks the has-pupil flag)")
            pupil_loss = F.mse_loss(out.pupil_pred, np.asarray(pupil, dtype=dt).reshape(out.pupil_pred.shape))
        else:
            pupil_loss = zero
        l2 = self.l2_term()
        total = main
        if out.recon is not None:
            total = add(total, mul(recon, float(cfg.alpha_recon)))
        if out.pupil_pred is not None:
            total = add(total, mul(pupil_loss, float(cfg.alpha_pupil)))
        total = add(total, mul(l2, float(cfg.l2_coeff)))
        out.losses = {"main": main, "recon": recon, "pupil": pupil_loss, "l2": l2, "total": total}
        return out


def _sub(rng, name):
    return None if rng is None else rng.child(name)


def _affine(t, scale, offset):
    return make_node(t.data * scale + offset, (t,), lambda g: (g * scale,))


# -- weights ----------------------------------------------------------------------
class WeightMismatch(ValueError):
    """Checkpoint tensors do not fit the model; ``offenders`` lists the names."""

    def __init__(self, offenders, detail):
        self.offenders = offenders
        super().__init__(f"weight mismatch at {offenders[0]!r} ({detail}); offenders: {', '.join(offenders)}")


def state_dict(model: MTLTransformer) -> dict:
    state = {k: p.data for k, p in model.named_parameters()}
    state.update(model.buffers())
    return state


def save_weights(model: MTLTransformer, target, meta=None):
    """Write parameters and buffers to a path or binary stream."""
    info = {"config": model.cfg.to_dict(), **(meta or {})}
    datafmt.write_tensors(target, state_dict(model), info)


def load_weights(model: MTLTransformer, source, allow=None) -> MTLTransformer:
    """Load a checkpoint into ``model`` in place.

    ``allow`` restricts loading to tensors whose names start with one of the
    given prefixes (e.g. ``("encoder.",)``); everything else keeps its value.
    Every selected model tensor must be present with a matching shape.
    """
    tensors, _ = datafmt.read_tensors(source)
    own = state_dict(model)
    selected = [k for k in own if allow is None or k.startswith(tuple(allow))]
    missing = [k for k in selected if k not in tensors]
    if missing:
        raise WeightMismatch(missing, "missing from checkpoint")
    if allow is None:
        extra = [k for k in tensors if k not in own]
        if extra:
            raise WeightMismatch(extra, "not a parameter of this model")
    bad = [k for k in selected if tensors[k].shape != own[k].shape]
    if bad:
        k = bad[0]
        raise WeightMismatch(bad, f"checkpoint shape {tensors[k].shape} vs model {own[k].shape}")
    params = model.parameters()
    for k in selected:
        value = tensors[k].astype(model.cfg.np_dtype)
        if k in params:
            params[k].data = value
            params[k].zero_grad()
        elif k == "buffers.gaze_offset":
            model.gaze_offset = value
        elif k == "buffers.gaze_scale":
            model.gaze_scale = value
    return model


def load_model(source, seed=0) -> tuple:
    """Rebuild a model from a checkpoint's embedded config; returns ``(model, meta)``."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    tensors, meta = datafmt.read_tensors(source)
    model = MTLTransformer(ModelConfig.from_dict(meta["config"]), seed)
    buf = io.BytesIO()
    datafmt.write_tensors(buf, tensors, meta)
    buf.seek(0)
    load_weights(model, buf)
    return model, meta


def checksum(arrays) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()
