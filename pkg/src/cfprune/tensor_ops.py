"""Deterministic forward-pass kernels.

Activations are NCHW float32 arrays: (batch, channels, height, width).
Convolution weights are (n_out, n_in, kh, kw).  All convolution and linear
accumulation happens in float64 and is rounded to float32 on store, which
keeps duplicate-filter arithmetic exact enough for the 1e-4 pruning checks.

Only the layer kinds needed for VGG/ResNet-style networks exist; there is
no dilation, no grouping, no training mode.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

LAYER_KINDS = (
    "relu",
    "batchnorm",
    "maxpool",
    "avgpool",
    "global_avgpool",
    "add",
    "concat",
    "linear",
)


def as_f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


def conv2d(x, weights, bias=None, stride=1, padding=0) -> np.ndarray:
    """2-D cross-correlation: per-output-channel sum over input channels.

    x: (b, n_in, h, w); weights: (n_out, n_in, kh, kw); uniform symmetric
    zero padding.  Accumulates in float64, returns float32.
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 4:
        raise ShapeError("conv2d input must be 4-D (b, c, h, w)", actual=x.shape)
    if weights.ndim != 4:
        raise ShapeError("conv2d weights must be 4-D (n_out, n_in, kh, kw)", actual=weights.shape)
    b, c_in, h, w = x.shape
    n_out, c_w, kh, kw = weights.shape
    if c_in != c_w:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c_in} channels, weights expect {c_w}",
            expected=c_w,
            actual=c_in,
        )
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit padded input {hp}x{wp}",
            expected=f"<= {hp}x{wp}",
            actual=f"{kh}x{kw}",
        )
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (n_out,):
            raise ShapeError("conv2d bias length must equal n_out", expected=(n_out,), actual=bias.shape)

    xp = x.astype(np.float64)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    # im2col: (b, c_in*kh*kw, h_out*w_out) then one GEMM per batch stack.
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # (b, c, h_out, w_out, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c_in * kh * kw, h_out * w_out)
    wmat = weights.astype(np.float64).reshape(n_out, c_in * kh * kw)
    out = np.matmul(wmat, cols)  # (b, n_out, h_out*w_out)
    if bias is not None:
        out += bias.astype(np.float64)[None, :, None]
    return out.reshape(b, n_out, h_out, w_out).astype(np.float32)


def flatten_one(feature) -> np.ndarray:
    """Reshape one feature map (any rank) into a row-major 1-D vector."""
    a = np.asarray(feature)
    if a.size == 0:
        raise ShapeError("cannot flatten an empty tensor", actual=a.shape)
    return np.ascontiguousarray(a).reshape(-1)


def _pool2d(x, kind, kernel, stride, padding=0):
    b, c, h, w = x.shape
    if padding:
        fill = -np.inf if kind == "max" else 0.0
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
        h, w = h + 2 * padding, w + 2 * padding
    if kernel > h or kernel > w:
        raise ShapeError(f"pool kernel {kernel} exceeds input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    if kind == "max":
        return win.max(axis=(4, 5)).astype(np.float32)
    return win.mean(axis=(4, 5), dtype=np.float64).astype(np.float32)


def apply_layer(node_kind, inputs, params=None) -> np.ndarray:
    """Evaluate one non-convolution layer.

    `inputs` is a list of activation tensors; all kinds except add/concat
    take exactly one.  `params` carries node parameters and, for batchnorm
    and linear, the weight arrays (mean/var/scale/shift, weight/bias).
    """
    params = params or {}
    if node_kind not in LAYER_KINDS:
        raise ShapeError(f"unknown layer kind {node_kind!r}")
    if node_kind in ("add", "concat"):
        if len(inputs) < 2:
            raise ShapeError(f"{node_kind} needs at least 2 inputs, got {len(inputs)}")
    elif len(inputs) != 1:
        raise ShapeError(f"{node_kind} takes exactly 1 input, got {len(inputs)}")

    if node_kind == "relu":
        return np.maximum(inputs[0], 0.0).astype(np.float32)

    if node_kind == "batchnorm":
        x = inputs[0]
        mean, var = np.asarray(params["mean"]), np.asarray(params["var"])
        scale, shift = np.asarray(params["scale"]), np.asarray(params["shift"])
        eps = float(params.get("epsilon", 1e-5))
        c = x.shape[1]
        for name, v in (("mean", mean), ("var", var), ("scale", scale), ("shift", shift)):
            if v.shape != (c,):
                raise ShapeError(f"batchnorm {name} must have {c} entries", expected=(c,), actual=v.shape)
        alpha = (scale / np.sqrt(var + eps)).astype(np.float32)
        beta = (shift - mean * scale / np.sqrt(var + eps)).astype(np.float32)
        return (x * alpha[None, :, None, None] + beta[None, :, None, None]).astype(np.float32)

    if node_kind == "maxpool":
        return _pool2d(inputs[0], "max", int(params["kernel"]), int(params.get("stride", params["kernel"])),
                       int(params.get("padding", 0)))

    if node_kind == "avgpool":
        return _pool2d(inputs[0], "avg", int(params["kernel"]), int(params.get("stride", params["kernel"])),
                       int(params.get("padding", 0)))

    if node_kind == "global_avgpool":
        x = inputs[0]
        return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(np.float32)

    if node_kind == "add":
        first = inputs[0]
        for other in inputs[1:]:
            if other.shape != first.shape:
                raise ShapeError("add inputs must share a shape", expected=first.shape, actual=other.shape)
        acc = np.zeros(first.shape, dtype=np.float64)
        for t in inputs:
            acc += t
        return acc.astype(np.float32)

    if node_kind == "concat":
        first = inputs[0]
        for other in inputs[1:]:
            if other.shape[0] != first.shape[0] or other.shape[2:] != first.shape[2:]:
                raise ShapeError("concat inputs must match on non-channel dims",
                                 expected=first.shape, actual=other.shape)
        return np.concatenate(inputs, axis=1).astype(np.float32)

    # linear: flatten spatial dims, one GEMM; weight is (out_features, in_features)
    x = inputs[0]
    weight = np.asarray(params["weight"])
    bias = params.get("bias")
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    if flat.shape[1] != weight.shape[1]:
        raise ShapeError("linear input features mismatch", expected=weight.shape[1], actual=flat.shape[1])
    out = flat @ weight.astype(np.float64).T
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out.astype(np.float32)
