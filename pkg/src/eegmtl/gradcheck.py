"""Central-difference gradient checking and the layer-by-layer suite."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn import layers as L
from .rng import RngStream
from .tensor import Tensor, backward, concat, expand, getitem, matmul, mean, no_grad, reshape, square, transpose, tsum


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    worst_index: int = -1
    nonfinite: bool = False
    passed: bool = True


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    params: list = field(default_factory=list)
    label: str = ""

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def failures(self):
        return [p for p in self.params if not p.passed]

    def lines(self):
        for p in self.params:
            tag = "ok  " if p.passed else "FAIL"
            extra = " (non-finite f)" if p.nonfinite else ""
            yield (f"{tag} {self.label}:{p.name} rel={p.max_rel_error:.2e} abs={p.max_abs_error:.2e} "
                   f"n={p.checked}{extra}")


def grad_check(f, params, eps=1e-5, tol=1e-4, floor=1e-5, max_entries=None, seed=0) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    ``params`` maps names to float64 leaf tensors. The relative error of an
    entry is ``|auto - numeric| / max(|auto|, |numeric|, floor)``. With
    ``max_entries`` only that many entries per tensor (seeded choice) are probed.
    Non-finite ``f`` at a perturbed point marks the parameter failed instead of
    raising.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = dict(params)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 tensors; {name} is {p.dtype}")
        p.zero_grad()
    y = f()
    backward(y)
    report = GradCheckReport(tol, eps)
    pick = RngStream(seed, ("gradcheck",))
    for name, p in params.items():
        auto = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(pick.child(name).generator.choice(flat.size, max_entries, replace=False))
        worst_rel, worst_abs, worst_i, bad = 0.0, 0.0, -1, False
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(np.asarray(f().data).reshape(-1)[0])
                flat[i] = orig - eps
                fm = float(np.asarray(f().data).reshape(-1)[0])
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                bad = True
                continue
            num = (fp - fm) / (2 * eps)
            err = abs(auto[i] - num)
            rel = err / max(abs(auto[i]), abs(num), floor)
            if rel > worst_rel:
                worst_rel, worst_i = rel, int(i)
            worst_abs = max(worst_abs, err)
        report.params.append(ParamCheck(name, worst_rel, worst_abs, len(idx), worst_i, bad,
                                        passed=not bad and worst_rel <= tol))
    return report


# -- suite --------------------------------------------------------------------
def _leaf(rng, shape, scale=1.0, offset=0.0):
    return Tensor(rng.normal(shape) * scale + offset, requires_grad=True)


def _probe(out, rng):
    """Random linear functional of ``out`` so no gradient entry is trivially symmetric."""
    w = Tensor(rng.normal(out.shape))
    return tsum(out * w)


def _layer_params(layer, **inputs):
    params = dict(inputs)
    params.update({k: p for k, p in layer.named_parameters()})
    return params


def _to64(layer, rng):
    for name, p in layer.named_parameters():
        p.data = rng.child(name).normal(p.shape, 0.5) + (1.0 if p.init == "ones" else 0.0)
    return layer


def _checks(rng):
    """Yield ``(label, f, params, kwargs)`` for every primitive and layer."""
    r = rng
    a, b = _leaf(r.child("a"), (3, 4)), _leaf(r.child("b"), (3, 4))
    yield "add", lambda: _probe(a + b, r.child("p1")), {"a": a, "b": b}, {}
    yield "sub", lambda: _probe(a - b, r.child("p2")), {"a": a, "b": b}, {}
    yield "mul", lambda: _probe(a * b, r.child("p3")), {"a": a, "b": b}, {}
    d = _leaf(r.child("d"), (3, 4), 0.3, 2.0)
    yield "div", lambda: _probe(a / d, r.child("p4")), {"a": a, "d": d}, {}
    yield "square", lambda: _probe(square(a), r.child("p5")), {"a": a}, {}
    m1, m2 = _leaf(r.child("m1"), (2, 3, 4)), _leaf(r.child("m2"), (4, 5))
    yield "matmul", lambda: _probe(matmul(m1, m2), r.child("p6")), {"a": m1, "b": m2}, {}
    m3 = _leaf(r.child("m3"), (2, 4, 3))
    yield "matmul-batched", lambda: _probe(matmul(m1, m3), r.child("p7")), {"a": m1, "b": m3}, {}
    yield "sum-axis", lambda: _probe(tsum(m1, axis=1), r.child("p8")), {"a": m1}, {}
    yield "mean", lambda: square(mean(m1, axis=(0, 2))).sum(), {"a": m1}, {}
    yield "reshape-transpose", lambda: _probe(transpose(reshape(m1, (4, 6)), (1, 0)), r.child("p9")), {"a": m1}, {}
    yield "getitem", lambda: _probe(getitem(m1, (slice(None), 1)), r.child("p10")), {"a": m1}, {}
    yield "concat", lambda: _probe(concat([a, b], axis=1), r.child("p11")), {"a": a, "b": b}, {}
    v = _leaf(r.child("v"), (1, 4))
    yield "expand", lambda: _probe(expand(v, (3, 4)), r.child("p12")), {"v": v}, {}

    x = _leaf(r.child("x"), (3, 5))
    yield "relu", lambda: _probe(F.relu(x), r.child("p13")), {"x": x}, {}
    yield "gelu", lambda: _probe(F.gelu(x), r.child("p14")), {"x": x}, {}
    yield "softmax", lambda: _probe(F.softmax(x, axis=-1), r.child("p15")), {"x": x}, {}

    lin = _to64(L.Linear(5, 4, np.float64), r.child("lin"))
    yield "linear", lambda: _probe(lin(x), r.child("p16")), _layer_params(lin, x=x), {}

    img = _leaf(r.child("img"), (2, 2, 6, 7))
    conv = _to64(L.Conv2d(L.LayerSpec(L.LayerKind.CONV2D, 2, 3, (3, 2), (2, 1), (1, 1)), np.float64), r.child("conv"))
    yield "conv2d", lambda: _probe(conv(img), r.child("p17")), _layer_params(conv, x=img), {}
    dw = _to64(L.DepthwiseConv2d(L.LayerSpec(L.LayerKind.DEPTHWISE_CONV2D, 2, 6, (2, 3), (2, 1), (0, 1)), np.float64),
               r.child("dw"))
    yield "depthwise_conv2d", lambda: _probe(dw(img), r.child("p18")), _layer_params(dw, x=img), {}
    tc = _to64(L.ConvTranspose2d(L.LayerSpec(L.LayerKind.TRANSPOSED_CONV, 2, 3, (2, 3), (2, 2), (0, 1)), np.float64),
               r.child("tc"))
    yield "transposed_conv", lambda: _probe(tc(img), r.child("p19")), _layer_params(tc, x=img), {}
    inorm = _to64(L.InstanceNorm(2, dtype=np.float64), r.child("in"))
    yield "instance_norm", lambda: _probe(inorm(img), r.child("p20")), _layer_params(inorm, x=img), {}
    seq = _leaf(r.child("seq"), (2, 3, 4))
    lnorm = _to64(L.LayerNorm(4, dtype=np.float64), r.child("ln"))
    yield "layer_norm", lambda: _probe(lnorm(seq), r.child("p21")), _layer_params(lnorm, x=seq), {}
    mha = _to64(L.MultiHeadAttention(4, 2, np.float64), r.child("mha"))
    yield "multi_head_attention", lambda: _probe(mha(seq), r.child("p22")), _layer_params(mha, x=seq), {}
    mlp = _to64(L.MLPBlock(4, 8, np.float64), r.child("mlp"))
    yield "mlp_block", lambda: _probe(mlp(seq), r.child("p23")), _layer_params(mlp, x=seq), {}
    blk = _to64(L.TransformerBlock(4, 2, 2, dtype=np.float64), r.child("blk"))
    yield "transformer_block", lambda: _probe(blk(seq), r.child("p24")), _layer_params(blk, x=seq), {}
    mask = F.dropout_mask(seq.shape, 0.3, r.child("mask"), np.float64)
    yield "dropout-fixed-mask", lambda: _probe(F.dropout(seq, 0.3, True, mask=mask), r.child("p25")), {"x": seq}, {}
    small = _leaf(r.child("small"), (2, 3, 2, 3))
    yield "upsample", lambda: _probe(F.upsample_nearest(small, (5, 7)), r.child("p26")), {"x": small}, {}
    feat = _leaf(r.child("feat"), (2, 4, 2, 3))
    emb = _to64(L.PatchEmbed(4, (2, 3), np.float64), r.child("emb"))
    yield "patchify_embed", lambda: _probe(emb(feat), r.child("p27")), _layer_params(emb, x=feat), {}


def end_to_end_check(seed=0, eps=1e-5, tol=1e-4, max_entries=12, batch=2) -> GradCheckReport:
    """Desk model in float64 with every head on; dropout masks repeat per call."""
    from .model import ModelConfig, MTLTransformer

    cfg = ModelConfig.desk(dtype="float64", use_recon=True, use_pupil=True, alpha_recon=1.0, alpha_pupil=1.0)
    model = MTLTransformer(cfg, seed=seed)
    r = RngStream(seed, ("e2e",))
    for name, p in model.named_parameters():
        if p.init in ("zeros", "ones"):
            p.data = p.data + r.child("jitter", name).normal(p.shape, 0.1)
    x = r.child("x").normal((batch, 1, cfg.channels, cfg.timesteps))
    gaze = r.child("gaze").normal((batch, 2))
    pupil = r.child("pupil").normal(batch)

    def f():
        return model.total_loss(x, gaze, pupil, rng=RngStream(seed, ("dropout",))).losses["total"]

    report = grad_check(f, model.parameters(), eps, tol, max_entries=max_entries, seed=seed)
    report.label = "desk-model"
    return report


def run_suite(tol=1e-4, eps=1e-5, seed=0, include_model=True, max_entries=12):
    """Gradient-check every primitive, every layer and (optionally) the desk model."""
    reports = []
    for label, f, params, kw in _checks(RngStream(seed, ("suite",))):
        rep = grad_check(f, params, eps, tol, **kw)
        rep.label = label
        reports.append(rep)
    if include_model:
        reports.append(end_to_end_check(seed, eps, tol, max_entries))
    return reports
