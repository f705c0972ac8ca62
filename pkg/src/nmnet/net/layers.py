"""Forward/backward primitives over feature maps.

Feature maps are arrays shaped ``(..., N, W, C)``: any leading batch axes,
then correspondences, neighbor width and channels.  Every ``*_forward``
returns ``(out, cache)`` and the matching ``*_backward`` consumes the cache.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

IN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# Convolution along the neighbor axis
# ---------------------------------------------------------------------------


def _conv_geometry(width: int, d: int, padding: str):
    if padding == "same":
        if d % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel width, got {d}")
        pad = (d - 1) // 2
    elif padding == "valid":
        pad = 0
        if d > width:
            raise ShapeError(f"kernel width {d} exceeds input width {width}")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    out_w = width + 2 * pad - d + 1
    taps = []
    for t in range(d):
        shift = t - pad  # output position w reads input position w + shift
        w0, w1 = max(0, -shift), min(out_w, width - shift)
        if w0 < w1:
            taps.append((t, shift, w0, w1))
    return out_w, taps


def conv_over_width(x, kernel, bias=None, padding: str = "same"):
    """Width-``d`` convolution shared across correspondences.

    ``kernel`` is ``(d, C_in, C_out)``.  Zero padding is implicit: taps that
    would only read padding are skipped.
    """
    return conv_forward(x, kernel, bias, padding)[0]


def conv_forward(x, kernel, bias=None, padding: str = "same"):
    x = np.asarray(x)
    d, cin, cout = kernel.shape
    if x.ndim < 3 or x.shape[-1] != cin:
        raise ShapeError(f"input channels {x.shape[-1:]} do not match kernel {kernel.shape}")
    lead, width = x.shape[:-2], x.shape[-2]
    out_w, taps = _conv_geometry(width, d, padding)
    y = np.zeros(lead + (out_w, cout), dtype=np.result_type(x, kernel))
    for t, shift, w0, w1 in taps:
        xs = x[..., w0 + shift : w1 + shift, :].reshape(-1, cin)
        y[..., w0:w1, :] += (xs @ kernel[t]).reshape(lead + (w1 - w0, cout))
    if bias is not None:
        y += bias
    return y, (x, kernel, bias is not None, taps)


def conv_backward(dy, cache):
    x, kernel, has_bias, taps = cache
    cin, cout = kernel.shape[1:]
    lead = x.shape[:-2]
    dx = np.zeros_like(x)
    dk = np.zeros_like(kernel)
    for t, shift, w0, w1 in taps:
        xs = x[..., w0 + shift : w1 + shift, :].reshape(-1, cin)
        g = dy[..., w0:w1, :].reshape(-1, cout)
        dk[t] = xs.T @ g
        dx[..., w0 + shift : w1 + shift, :] += (g @ kernel[t].T).reshape(lead + (w1 - w0, cin))
    db = dy.reshape(-1, cout).sum(axis=0) if has_bias else None
    return dx, dk, db


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def _norm_backward(dxhat, xhat, inv_std, axes):
    m1 = dxhat.mean(axis=axes, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (dxhat - m1 - xhat * m2)


def instance_norm(x, scale=None, shift=None, eps: float = IN_EPS):
    """Per-scene, per-channel standardization over the correspondence and width axes."""
    return instance_norm_forward(x, scale, shift, eps)[0]


def instance_norm_forward(x, scale=None, shift=None, eps: float = IN_EPS):
    x = np.asarray(x)
    if x.shape[-3] * x.shape[-2] < 2:
        raise ShapeError("instance norm needs N * W > 1")
    axes = (-3, -2)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = xhat
    if scale is not None:
        y = y * scale
    if shift is not None:
        y = y + shift
    return y, (xhat, inv_std, scale, shift is not None)


def instance_norm_backward(dy, cache):
    xhat, inv_std, scale, has_shift = cache
    lead_axes = tuple(range(dy.ndim - 1))
    dscale = (dy * xhat).sum(axis=lead_axes) if scale is not None else None
    dshift = dy.sum(axis=lead_axes) if has_shift else None
    dxhat = dy * scale if scale is not None else dy
    return _norm_backward(dxhat, xhat, inv_std, (-3, -2)), dscale, dshift


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training: bool, eps: float = BN_EPS):
    """Batch normalization over every axis but channels.

    In training mode the running statistics are updated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        count = x.size // x.shape[-1]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mu
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * unbiased
    else:
        xc = x - running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma, training)


def batch_norm_backward(dy, cache):
    xhat, inv_std, gamma, training = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if training:
        dx = _norm_backward(dxhat, xhat, inv_std, axes)
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Activations, grouping, aggregation
# ---------------------------------------------------------------------------


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def group_features(features, indices):
    """Gather neighbor features: ``(..., N, 1, C)`` -> ``(..., N, k, C)``.

    ``indices`` is ``(N, k)`` or ``(..., N, k)`` matching the leading axes.
    """
    return group_forward(features, indices)[0]


def group_forward(features, indices):
    features = np.asarray(features)
    indices = np.asarray(indices)
    if features.shape[-2] != 1:
        raise ShapeError(f"grouping expects width 1, got {features.shape[-2]}")
    n = features.shape[-3]
    lead = features.shape[:-3]
    if indices.shape[-2] != n or indices.ndim < 2:
        raise ShapeError(f"graph covers {indices.shape[-2:]} nodes, features have N={n}")
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise ShapeError("graph index out of range")
    indices = np.broadcast_to(indices, lead + indices.shape[-2:])
    flat = features.reshape(-1, features.shape[-1])
    offsets = (np.arange(int(np.prod(lead, dtype=np.int64))) * n).reshape(lead + (1, 1))
    gidx = indices + offsets
    return flat[gidx], (features.shape, gidx)


def group_backward(dy, cache):
    shape, gidx = cache
    dflat = np.zeros((int(np.prod(shape[:-1])), shape[-1]), dtype=dy.dtype)
    np.add.at(dflat, gidx.reshape(-1), dy.reshape(-1, shape[-1]))
    return dflat.reshape(shape)


def pair_max_forward(x):
    """Halve the width by taking the max over adjacent pairs (odd tail kept as is)."""
    width = x.shape[-2]
    if width % 2:
        pad = np.full(x.shape[:-2] + (1, x.shape[-1]), -np.inf, dtype=x.dtype)
        x = np.concatenate([x, pad], axis=-2)
    pairs = x.reshape(x.shape[:-2] + (x.shape[-2] // 2, 2, x.shape[-1]))
    second = pairs[..., 1, :] > pairs[..., 0, :]
    y = np.where(second, pairs[..., 1, :], pairs[..., 0, :])
    return y, (second, width)


def pair_max_backward(dy, cache):
    second, width = cache
    dpairs = np.stack([dy * ~second, dy * second], axis=-2)
    dx = dpairs.reshape(dy.shape[:-2] + (dpairs.shape[-3] * 2, dy.shape[-1]))
    return dx[..., :width, :]


def width_max_forward(x):
    """Collapse the width axis by max; ties go to the first position."""
    idx = np.argmax(x, axis=-2)
    y = np.take_along_axis(x, idx[..., None, :], axis=-2)
    return y, (idx, x.shape)


def width_max_backward(dy, cache):
    idx, shape = cache
    dx = np.zeros(shape, dtype=dy.dtype)
    np.put_along_axis(dx, idx[..., None, :], dy, axis=-2)
    return dx


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
