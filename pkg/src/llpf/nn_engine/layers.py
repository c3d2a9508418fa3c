"""Array kernels for each layer kind: forward passes and their exact gradients.

Everything is plain numpy on NCHW tensors.  Convolutions go through an
im2col buffer which the backward pass reuses; pooling keeps explicit winner
indices so ties never double-count gradient.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


def dense_forward(x, w, b):
    return x @ w + b


def dense_backward(g, x, w):
    dx = g @ w.T
    dw = x.T @ g
    db = g.sum(axis=0)
    return dx, dw, db


# -- convolution -------------------------------------------------------------


def _pad_input(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x, kernel, stride, pad):
    """(N,C,H,W) -> (N, C*k*k, OH*OW) patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    xp = _pad_input(x, pad)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, OH, OW, k, k)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kernel * kernel, oh * ow)
    return np.ascontiguousarray(cols), (oh, ow)


def col2im(cols, x_shape, kernel, stride, pad, out_hw):
    """Scatter-add the inverse of :func:`im2col`."""
    n, c, h, w = x_shape
    oh, ow = out_hw
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kernel, kernel, oh, ow)
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if pad == 0:
        return xp
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d_forward(x, w, b, stride, pad):
    n = x.shape[0]
    out_c, in_c, k, _ = w.shape
    cols, (oh, ow) = im2col(x, k, stride, pad)
    wm = w.reshape(out_c, in_c * k * k)
    y = np.einsum("of,nfp->nop", wm, cols, optimize=True)
    y += b[None, :, None]
    return y.reshape(n, out_c, oh, ow), cols


def conv2d_backward(g, x_shape, w, cols, stride, pad):
    n, out_c, oh, ow = g.shape
    _, in_c, k, _ = w.shape
    gm = g.reshape(n, out_c, oh * ow)
    dw = np.einsum("nop,nfp->of", gm, cols, optimize=True).reshape(w.shape)
    db = gm.sum(axis=(0, 2))
    wm = w.reshape(out_c, in_c * k * k)
    dcols = np.einsum("of,nop->nfp", wm, gm, optimize=True)
    dx = col2im(dcols, x_shape, k, stride, pad, (oh, ow))
    return dx, dw, db


# -- batch normalization -------------------------------------------------------


def _bn_axes(x):
    # channel axis is 1 for images, 1 for (N, C) features
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_shape(x):
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def batchnorm_forward(x, scale, shift, mode, running_mean, running_var, momentum=0.1):
    """Returns (y, cache, new_running_mean, new_running_var).

    Train mode normalizes with batch statistics (population variance) and
    blends them into the running buffers; eval mode uses the buffers as-is.
    """
    axes = _bn_axes(x)
    shape = _bn_shape(x)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = (1 - momentum) * running_mean + momentum * mean.astype(running_mean.dtype)
        new_var = (1 - momentum) * running_var + momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = scale.reshape(shape) * xhat + shift.reshape(shape)
    cache = (xhat, inv_std, mean, mode)
    return y, cache, new_mean, new_var


def batchnorm_backward(g, x, scale, cache):
    xhat, inv_std, mean, mode = cache
    axes = _bn_axes(x)
    shape = _bn_shape(x)
    m = float(np.prod([x.shape[a] for a in axes]))
    dscale = (g * xhat).sum(axis=axes)
    dshift = g.sum(axis=axes)
    dxhat = g * scale.reshape(shape)
    if mode == "eval":
        dx = dxhat * inv_std.reshape(shape)
        return dx, dscale, dshift
    # train mode: the batch statistics depend on x
    inv = inv_std.reshape(shape)
    sum_dxhat = dxhat.sum(axis=axes).reshape(shape)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes).reshape(shape)
    dx = (inv / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dscale, dshift


# -- pooling -------------------------------------------------------------------


def maxpool_forward(x, kernel):
    n, c, h, w = x.shape
    oh, ow = h // kernel, w // kernel
    xr = x.reshape(n, c, oh, kernel, ow, kernel)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, kernel * kernel)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool_backward(g, x_shape, kernel, idx):
    n, c, h, w = x_shape
    oh, ow = h // kernel, w // kernel
    flat = np.zeros((n, c, oh, ow, kernel * kernel), dtype=g.dtype)
    np.put_along_axis(flat, idx[..., None], g[..., None], axis=-1)
    dx = flat.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h, w)


def avgpool_forward(x, kernel=None):
    n, c, h, w = x.shape
    if kernel is None:  # global
        return x.mean(axis=(2, 3), keepdims=True)
    oh, ow = h // kernel, w // kernel
    xr = x.reshape(n, c, oh, kernel, ow, kernel)
    return xr.mean(axis=(3, 5))


def avgpool_backward(g, x_shape, kernel=None):
    n, c, h, w = x_shape
    if kernel is None:
        return np.broadcast_to(g / (h * w), x_shape).astype(g.dtype)
    dx = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
    return dx / (kernel * kernel)


# -- loss ----------------------------------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch plus the gradient w.r.t. logits.

    The loss accumulates in float64; the gradient keeps the logits dtype.
    """
    z = logits.astype(np.float64, copy=False)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = logits.shape[0]
    loss = float(-log_probs[np.arange(n), labels].mean())
    probs = np.exp(log_probs)
    probs[np.arange(n), labels] -= 1.0
    dlogits = (probs / n).astype(logits.dtype)
    return loss, dlogits
