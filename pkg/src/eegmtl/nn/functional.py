"""Differentiable layer kernels.

Convolutions run a loop over kernel taps with a ``tensordot`` per tap; the tap
order is fixed, so results are bitwise reproducible. Image-like inputs are
``N x C x H x W``; a 3-D ``C x H x W`` input is treated as a batch of one.

Backward rules are module-level functions so that a harness can swap one out
(the gradient-check suite's self-test does exactly that).
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..tensor import Tensor, as_tensor, concat, expand, make_node, matmul, mean, reshape, square, sub, transpose


def _pair(v):
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv_extent(n, k, s, p, axis="axis"):
    span = n + 2 * p - k
    if span < 0 or s < 1:
        raise ValueError(f"conv geometry on {axis}: extent {n} with kernel {k}, padding {p} gives {span + 1} < 1")
    return span // s + 1


def transposed_extent(n, k, s, p, axis="axis"):
    out = (n - 1) * s + k - 2 * p
    if out < 1:
        raise ValueError(f"transposed conv on {axis}: computed extent {out} from input {n}, kernel {k}, stride {s}, padding {p}")
    return out


def _batched(x, fn):
    """Run ``fn`` on a 4-D view of ``x``; undo the batch axis for 3-D inputs."""
    x = as_tensor(x)
    if x.ndim == 3:
        out = fn(reshape(x, (1,) + x.shape))
        return reshape(out, out.shape[1:])
    if x.ndim != 4:
        raise ValueError(f"expected C x H x W or N x C x H x W input, got shape {x.shape}")
    return fn(x)


def _taps(start, stride, count):
    return slice(start, start + stride * (count - 1) + 1, stride)


# -- activations ------------------------------------------------------------
def _relu_backward(x, g):
    return g * (x > 0)


def relu(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.maximum(x.data, 0), (x,), lambda g: (_relu_backward(x.data, g),))


def _gelu_backward(x, g):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return g * (cdf + x * pdf)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    out = (0.5 * x.data * (1.0 + erf(x.data / math.sqrt(2.0)))).astype(x.dtype)
    return make_node(out, (x,), lambda g: (_gelu_backward(x.data, g).astype(x.dtype),))


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


# -- dense -----------------------------------------------------------------
def linear(x, weight, bias=None) -> Tensor:
    """``x[..., in] @ weight[in, out] + bias[out]``."""
    x = as_tensor(x)
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, -1)), weight, bias), (-1,))
    out = matmul(x, weight)
    if bias is not None:
        out = out + expand(bias, out.shape)
    return out


# -- convolutions ------------------------------------------------------------
def _conv2d_backward(xp, w, g, stride, pad, in_hw):
    sh, sw = stride
    _, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            hs, ws = _taps(i, sh, ho), _taps(j, sw, wo)
            gxp[:, :, hs, ws] += np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            gw[:, :, i, j] = np.tensordot(g, xp[:, :, hs, ws], axes=([0, 2, 3], [0, 2, 3]))
    ph, pw = pad
    h, wd = in_hw
    return gxp[:, :, ph:ph + h, pw:pw + wd], gw


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation with ``weight[C_out, C_in, kh, kw]``."""
    weight = as_tensor(weight)
    stride, padding = _pair(stride), _pair(padding)

    def run(x4):
        n, cin, h, wd = x4.shape
        cout, wcin, kh, kw = weight.shape
        if wcin != cin:
            raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
        ho = conv_extent(h, kh, stride[0], padding[0], "height")
        wo = conv_extent(wd, kw, stride[1], padding[1], "width")
        xp = np.pad(x4.data, ((0, 0), (0, 0), (padding[0],) * 2, (padding[1],) * 2))
        acc = np.zeros((n, ho, wo, cout), dtype=np.result_type(x4.dtype, weight.dtype))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, _taps(i, stride[0], ho), _taps(j, stride[1], wo)]
                acc += np.tensordot(patch, weight.data[:, :, i, j], axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
        parents = (x4, weight)
        if bias is not None:
            out += as_tensor(bias).data[None, :, None, None]
            parents += (as_tensor(bias),)

        def _back(g):
            gx, gw = _conv2d_backward(xp, weight.data, g, stride, padding, (h, wd))
            grads = (gx, gw)
            return grads + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

        return make_node(out, parents, _back)

    return _batched(x, run)


def _depthwise_backward(xp, w4, g5, stride, pad, in_hw):
    sh, sw = stride
    kh, kw = w4.shape[2:]
    ho, wo = g5.shape[3:]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w4)
    for i in range(kh):
        for j in range(kw):
            hs, ws = _taps(i, sh, ho), _taps(j, sw, wo)
            gxp[:, :, hs, ws] += np.einsum("ncmhw,cm->nchw", g5, w4[:, :, i, j])
            gw[:, :, i, j] = np.einsum("ncmhw,nchw->cm", g5, xp[:, :, hs, ws])
    ph, pw = pad
    h, wd = in_hw
    return gxp[:, :, ph:ph + h, pw:pw + wd], gw


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Per-channel convolution; ``weight[C*m, 1, kh, kw]``, output channel ``c*m + j`` reads input ``c``."""
    weight = as_tensor(weight)
    stride, padding = _pair(stride), _pair(padding)

    def run(x4):
        n, c, h, wd = x4.shape
        cm, one, kh, kw = weight.shape
        if one != 1 or cm % c:
            raise ValueError(f"depthwise_conv2d: weight {weight.shape} incompatible with {c} input channels")
        m = cm // c
        ho = conv_extent(h, kh, stride[0], padding[0], "height")
        wo = conv_extent(wd, kw, stride[1], padding[1], "width")
        w4 = weight.data.reshape(c, m, kh, kw)
        xp = np.pad(x4.data, ((0, 0), (0, 0), (padding[0],) * 2, (padding[1],) * 2))
        acc = np.zeros((n, c, m, ho, wo), dtype=np.result_type(x4.dtype, weight.dtype))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, _taps(i, stride[0], ho), _taps(j, stride[1], wo)]
                acc += patch[:, :, None] * w4[None, :, :, i, j, None, None]
        out = acc.reshape(n, cm, ho, wo)
        parents = (x4, weight)
        if bias is not None:
            out += as_tensor(bias).data[None, :, None, None]
            parents += (as_tensor(bias),)

        def _back(g):
            gx, gw = _depthwise_backward(xp, w4, g.reshape(n, c, m, ho, wo), stride, padding, (h, wd))
            grads = (gx, gw.reshape(weight.shape))
            return grads + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

        return make_node(out, parents, _back)

    return _batched(x, run)


def _conv_transpose_backward(x, w, gfull, stride):
    sh, sw = stride
    _, _, kh, kw = w.shape
    h, wd = x.shape[2:]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            gs = gfull[:, :, _taps(i, sh, h), _taps(j, sw, wd)]
            gx += np.tensordot(gs, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
            gw[:, :, i, j] = np.tensordot(x, gs, axes=([0, 2, 3], [0, 2, 3]))
    return gx, gw


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight[C_in, C_out, kh, kw]``.

    Output extent per axis is ``(in - 1) * stride + kernel - 2 * padding``.
    """
    weight = as_tensor(weight)
    stride, padding = _pair(stride), _pair(padding)

    def run(x4):
        n, cin, h, wd = x4.shape
        wcin, cout, kh, kw = weight.shape
        if wcin != cin:
            raise ValueError(f"conv_transpose2d: input has {cin} channels, weight expects {wcin}")
        ho = transposed_extent(h, kh, stride[0], padding[0], "height")
        wo = transposed_extent(wd, kw, stride[1], padding[1], "width")
        hf, wf = ho + 2 * padding[0], wo + 2 * padding[1]
        full = np.zeros((n, cout, hf, wf), dtype=np.result_type(x4.dtype, weight.dtype))
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(x4.data, weight.data[:, :, i, j], axes=([1], [0]))
                full[:, :, _taps(i, stride[0], h), _taps(j, stride[1], wd)] += contrib.transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(full[:, :, padding[0]:padding[0] + ho, padding[1]:padding[1] + wo])
        parents = (x4, weight)
        if bias is not None:
            out += as_tensor(bias).data[None, :, None, None]
            parents += (as_tensor(bias),)

        def _back(g):
            gfull = np.pad(g, ((0, 0), (0, 0), (padding[0],) * 2, (padding[1],) * 2))
            gx, gw = _conv_transpose_backward(x4.data, weight.data, gfull, stride)
            grads = (gx, gw)
            return grads + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

        return make_node(out, parents, _back)

    return _batched(x, run)


# -- normalization -----------------------------------------------------------
def _normalize(x, axes, eps):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    return xc * inv, inv


def _norm_backward(xhat, inv, gxhat, axes):
    return inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                  - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))


def _affine_norm(x, axes, chan_shape, gamma, beta, eps):
    xhat, inv = _normalize(x.data, axes, eps)
    xhat = xhat.astype(x.dtype, copy=False)
    out = xhat
    parents = (x,)
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        out = xhat * gamma.data.reshape(chan_shape) + beta.data.reshape(chan_shape)
        parents = (x, gamma, beta)
    red = tuple(i for i in range(x.ndim) if chan_shape[i] == 1)

    def _back(g):
        if gamma is None:
            return (_norm_backward(xhat, inv, g, axes),)
        gx = _norm_backward(xhat, inv, g * gamma.data.reshape(chan_shape), axes)
        return gx, (g * xhat).sum(axis=red).reshape(gamma.shape), g.sum(axis=red).reshape(beta.shape)

    return make_node(out, parents, _back)


def instance_norm(x, gamma=None, beta=None, eps=1e-5) -> Tensor:
    """Normalize each channel of each sample over its spatial positions.

    ``x`` is ``N x C x spatial...``; a missing batch axis is not inferred here,
    callers pass batched tensors.
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"instance_norm expects N x C x spatial..., got shape {x.shape}")
    spatial = int(np.prod(x.shape[2:]))
    if spatial < 2:
        raise ValueError(f"instance_norm: per-channel spatial size is {spatial}; need at least 2")
    axes = tuple(range(2, x.ndim))
    chan_shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    return _affine_norm(x, axes, chan_shape, gamma, beta, eps)


def layer_norm(x, gamma=None, beta=None, eps=1e-5) -> Tensor:
    """Normalize over the last (feature) axis."""
    x = as_tensor(x)
    if x.shape[-1] < 2:
        raise ValueError(f"layer_norm: feature size is {x.shape[-1]}; need at least 2")
    chan_shape = (1,) * (x.ndim - 1) + (x.shape[-1],)
    return _affine_norm(x, (x.ndim - 1,), chan_shape, gamma, beta, eps)


# -- stochastic / resampling -------------------------------------------------
def dropout_mask(shape, p, rng, dtype=np.float32) -> np.ndarray:
    keep = rng.uniform(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def dropout(x, p, training, rng=None, mask=None) -> Tensor:
    """Inverted dropout. Identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in training mode needs an rng stream or an explicit mask")
        mask = dropout_mask(x.shape, p, rng, x.dtype)
    m = np.asarray(mask, dtype=x.dtype)
    return make_node(x.data * m, (x,), lambda g: (g * m,))


def _nearest_matrix(n_out, n_in, dtype):
    idx = (np.arange(n_out) * n_in) // n_out
    mat = np.zeros((n_out, n_in), dtype=dtype)
    mat[np.arange(n_out), idx] = 1
    return mat


def upsample_nearest(x, target) -> Tensor:
    """Resize the trailing two axes to ``target`` by nearest-neighbour lookup."""
    x = as_tensor(x)
    ht, wt = int(target[0]), int(target[1])
    if ht < 1 or wt < 1:
        raise ValueError(f"upsample target must be positive, got {target}")
    h, w = x.shape[-2:]
    if (h, w) == (ht, wt):
        return x
    mh = _nearest_matrix(ht, h, x.dtype)
    mw = _nearest_matrix(wt, w, x.dtype)
    out = mh @ x.data @ mw.T
    return make_node(out, (x,), lambda g: (mh.T @ g @ mw,))


# -- token sequences ----------------------------------------------------------
def patchify_embed(features, pos_table, cls_token) -> Tensor:
    """``N x D x Hp x Wp`` grid -> ``N x (Hp*Wp + 1) x D`` token sequence.

    Row 0 is the class token; rows ``1..`` walk the grid in row-major order.
    Each row gets the matching row of ``pos_table`` added.
    """
    features = as_tensor(features)
    squeeze = features.ndim == 3
    if squeeze:
        features = reshape(features, (1,) + features.shape)
    n, d, hp, wp = features.shape
    pos_table, cls_token = as_tensor(pos_table), as_tensor(cls_token)
    if pos_table.shape != (hp * wp + 1, d):
        raise ValueError(f"positional table has shape {pos_table.shape}, expected {(hp * wp + 1, d)}")
    tokens = transpose(reshape(features, (n, d, hp * wp)), (0, 2, 1))
    cls_rows = expand(reshape(cls_token, (1, 1, d)), (n, 1, d))
    seq = concat([cls_rows, tokens], axis=1)
    seq = seq + expand(reshape(pos_table, (1, hp * wp + 1, d)), seq.shape)
    return reshape(seq, seq.shape[1:]) if squeeze else seq


def depatchify(patch_rows, grid) -> Tensor:
    """Inverse of the row-major flattening in :func:`patchify_embed` (no CLS row)."""
    patch_rows = as_tensor(patch_rows)
    hp, wp = grid
    n, p, d = patch_rows.shape
    if p != hp * wp:
        raise ValueError(f"{p} patch rows cannot fill a {hp}x{wp} grid")
    return reshape(transpose(patch_rows, (0, 2, 1)), (n, d, hp, wp))


# -- attention -----------------------------------------------------------------
def multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads, return_weights=False):
    """Scaled dot-product self-attention over ``x[N, L, D]`` (or ``x[L, D]``)."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, length, d = x.shape
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (n, length, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(linear(x, wq, bq)), split(linear(x, wk, bk)), split(linear(x, wv, bv))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (n, length, d))
    out = linear(ctx, wo, bo)
    if squeeze:
        out = reshape(out, (length, d))
    return (out, attn.data) if return_weights else out


# -- losses -------------------------------------------------------------------
def mse_loss(pred, target) -> Tensor:
    """Mean of squared elementwise differences over all elements."""
    pred = as_tensor(pred)
    if not (isinstance(target, Tensor) and target.requires_grad):
        target = Tensor(np.asarray(getattr(target, "data", target), dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))
