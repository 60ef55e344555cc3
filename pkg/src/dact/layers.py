"""Network layer primitives with explicit forward/backward passes.

Everything is plain numpy. Forward functions return (out, cache); backward
functions take (dout, cache) and return input/parameter gradients. Batch
layout is (B, C, H, W) for spatial tensors and (B, D) for vectors.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _im2col(x, k):
    """(B, C, H, W) -> (B, H*W, C*k*k) for a stride-1 same-padding conv.

    The column layout is channel-major, so extending the input with extra
    channels appends columns without reordering the existing ones.
    """
    b, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, H, W, k, k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * k * k)


def conv2d_forward(x, w, b):
    """3x3 (or any odd k) convolution, stride 1, same padding."""
    bsz, c, h, wid = x.shape
    cout, cin, k, _ = w.shape
    if cin != c:
        raise ValueError(f"conv expects {cin} input channels, got {c}")
    cols = _im2col(x, k)
    wmat = w.reshape(cout, -1)
    if c > 3:
        # accumulate the first-3-channel block separately so a kernel
        # inflated with appended channels reproduces the 3-channel conv
        # exactly when those channels are zero
        k3 = 3 * k * k
        out = cols[:, :, :k3] @ wmat[:, :k3].T + cols[:, :, k3:] @ wmat[:, k3:].T
    else:
        out = cols @ wmat.T
    out = out + b
    out = out.transpose(0, 2, 1).reshape(bsz, cout, h, wid)
    return out, (cols, x.shape, w)


def conv2d_backward(dout, cache):
    cols, x_shape, w = cache
    bsz, c, h, wid = x_shape
    cout, cin, k, _ = w.shape
    dmat = np.ascontiguousarray(
        dout.reshape(bsz, cout, h * wid).transpose(0, 2, 1))  # (B, HW, Cout)
    db = dout.sum(axis=(0, 2, 3))
    dw = (dmat.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])
          ).reshape(w.shape)
    dcols = dmat @ w.reshape(cout, -1)  # (B, HW, C*k*k)
    dcols = dcols.reshape(bsz, h, wid, c, k, k)
    pad = k // 2
    dxp = np.zeros((bsz, c, h + 2 * pad, wid + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wid] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wid]
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch norm over (B, H, W).

    Train mode normalizes by batch statistics and returns updated running
    stats (torch-style: unbiased variance feeds the running estimate);
    eval mode uses the running stats unchanged.
    """
    axes = (0, 2, 3)
    view = (1, -1, 1, 1)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (n / max(n - 1, 1))
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * unbiased
    else:
        mean = running_mean
        var = running_var
        new_mean = running_mean
        new_var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(view)) * inv_std.reshape(view)
    out = gamma.reshape(view) * xhat + beta.reshape(view)
    cache = (xhat, gamma, inv_std, mode)
    return out, cache, new_mean, new_var


def batchnorm_backward(dout, cache):
    xhat, gamma, inv_std, mode = cache
    view = (1, -1, 1, 1)
    axes = (0, 2, 3)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(view)
    if mode == "train":
        n = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dx = (inv_std.reshape(view) / n) * (
            n * dxhat
            - dxhat.sum(axis=axes).reshape(view)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(view))
    else:
        dx = dxhat * inv_std.reshape(view)
    return dx, dgamma, dbeta


def relu_forward(x):
    out = np.maximum(x, 0.0)
    return out, x > 0


def relu_backward(dout, cache):
    return dout * cache


def maxpool2_forward(x):
    """2x2 max pooling, stride 2; spatial dims must be even."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {(h, w)}")
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, x_shape = cache
    b, c, h, w = x_shape
    dflat = np.zeros((b, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
    dx = dflat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(b, c, h, w)


def global_avgpool_forward(x):
    b, c, h, w = x.shape
    return x.mean(axis=(2, 3)), (h, w)


def global_avgpool_backward(dout, cache):
    h, w = cache
    return np.broadcast_to(dout[:, :, None, None] / (h * w),
                           dout.shape + (h, w)).copy()


def affine_forward(x, w, b):
    return x @ w + b, (x, w)


def affine_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def dropout_forward(x, rate, mode, rng=None):
    """Inverted dropout: identity in eval mode; each row of a batch gets its
    own mask (one draw per sample)."""
    if mode != "train" or rate <= 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets, sample_weights=None):
    """Cross-entropy averaged over the batch, optionally sample-weighted
    (weighted mean with weights normalized to sum 1).

    Returns (loss, probs, dlogits); unweighted dlogits = (probs - onehot) / B.
    """
    probs = softmax(logits)
    b = logits.shape[0]
    rows = np.arange(b)
    eps = np.finfo(probs.dtype).tiny
    nll = -np.log(np.maximum(probs[rows, targets], eps))
    if sample_weights is None:
        coeff = np.full(b, 1.0 / b)
    else:
        w = np.asarray(sample_weights, dtype=probs.dtype)
        coeff = w / w.sum()
    loss = float((coeff * nll).sum())
    dlogits = probs.copy()
    dlogits[rows, targets] -= 1.0
    dlogits *= coeff[:, None]
    return loss, probs, dlogits
