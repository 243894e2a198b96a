"""Differentiable layer primitives on (N, C, H, W) arrays.

Each forward has a matching ``*_backward`` taking the upstream gradient and
whatever the forward cached.  Convolution is cross-correlation (no kernel
flip) lowered through strided window views and tensordot.

Weight layouts: conv ``(out, in, k, k)``; deconv ``(in, out, k, k)`` so that a
deconv with the weights of a conv is exactly that conv's transpose; fc
``(out, in * k * k)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _unpad(x, p):
    return x if p == 0 else x[:, :, p:-p, p:-p]


def out_extent(n, k, s, p, dilation=1):
    return (n + 2 * p - ((k - 1) * dilation + 1)) // s + 1


def _check_extent(h, w, k, s, p, dilation=1):
    ho, wo = out_extent(h, k, s, p, dilation), out_extent(w, k, s, p, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"nonpositive output extent {ho}x{wo} for input {h}x{w}, k={k} s={s} p={p}")
    return ho, wo


def _windows(xp, k, s, ho, wo):
    """(N, C, Ho, Wo, k, k) view of k x k windows at stride s."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]


# ---------------------------------------------------------------------------
# convolution

def conv2d(x, w, b=None, s=1, p=0):
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, weights expect {ci}")
    if k != k2:
        raise ValueError("only square kernels are supported")
    ho, wo = _check_extent(h, wd, k, s, p)
    cols = _windows(_pad(x, p), k, s, ho, wo)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv2d_backward(dy, x, w, s=1, p=0, need_dx=True):
    """Gradients (dx, dw, db) of conv2d given upstream `dy`."""
    k = w.shape[2]
    ho, wo = dy.shape[2], dy.shape[3]
    xp = _pad(x, p)
    cols = _windows(xp, k, s, ho, wo)
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3])).astype(x.dtype)
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dcols = np.tensordot(dy, w, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                if not w[:, :, i, j].any():
                    continue  # rarefied taps
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                    dcols[..., i, j].transpose(0, 3, 1, 2)
                )
        dx = _unpad(dxp, p)
    return dx, dw, db


# ---------------------------------------------------------------------------
# max pooling

def pool2d_max(x, k, s, p=0, dilation=1):
    """Returns (y, argmax) where argmax indexes the row-major window position."""
    n, c, h, w = x.shape
    ho, wo = _check_extent(h, w, k, s, p, dilation)
    span = (k - 1) * dilation + 1
    win = _windows(_pad(x, p, -np.inf), span, s, ho, wo)[..., ::dilation, ::dilation]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # first maximum wins ties
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def pool2d_max_backward(dy, arg, x_shape, k, s, p=0, dilation=1):
    n, c, h, w = x_shape
    ho, wo = dy.shape[2], dy.shape[3]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
    for t in range(k * k):
        i, j = divmod(t, k)
        hit = arg == t
        if not hit.any():
            continue
        oi, oj = i * dilation, j * dilation
        dxp[:, :, oi : oi + s * (ho - 1) + 1 : s, oj : oj + s * (wo - 1) + 1 : s] += dy * hit
    return _unpad(dxp, p)


# ---------------------------------------------------------------------------
# elementwise

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def fuse_sum(a, b):
    if a.shape != b.shape:
        raise ValueError(f"fusion shape mismatch: {a.shape} vs {b.shape}")
    return a + b


# ---------------------------------------------------------------------------
# transposed convolution

def default_deconv_kernel(f):
    return 2 * f - f % 2


def deconv2d(x, w, f, p=0):
    """Backwards strided convolution: upsample by `f` with weights `w` (in, out, k, k)."""
    n, c, h, wd = x.shape
    ci, co, k, k2 = w.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, weights expect {ci}")
    if k != k2:
        raise ValueError("only square kernels are supported")
    fh, fw = (h - 1) * f + k, (wd - 1) * f + k
    if fh - 2 * p < 1 or fw - 2 * p < 1:
        raise ValueError(f"nonpositive deconv output for input {h}x{wd}, f={f} k={k} p={p}")
    cols = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, Co, k, k)
    full = np.zeros((n, co, fh, fw), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + f * (h - 1) + 1 : f, j : j + f * (wd - 1) + 1 : f] += (
                cols[..., i, j].transpose(0, 3, 1, 2)
            )
    return _unpad(full, p)


def deconv2d_backward(dy, x, w, f, p=0, need_dx=True, need_dw=True):
    k = w.shape[2]
    h, wd = x.shape[2], x.shape[3]
    win = _windows(_pad(dy, p), k, f, h, wd)  # (N, Co, H, W, k, k)
    dx = dw = None
    if need_dx:
        dx = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dx = np.ascontiguousarray(dx, dtype=x.dtype)
    if need_dw:
        dw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3])).astype(x.dtype)
    return dx, dw


def bilinear_weights_1d(f):
    k = default_deconv_kernel(f)
    c = (k - 1) / (2 * f)
    return 1 - np.abs(np.arange(k) / f - c)


def bilinear_kernel(f, channels, dtype=np.float32):
    """Channel-diagonal bilinear upsampling weights of shape (channels, channels, k, k)."""
    if f < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {f}")
    w1 = bilinear_weights_1d(f)
    k = len(w1)
    w = np.zeros((channels, channels, k, k), dtype=dtype)
    w[np.arange(channels), np.arange(channels)] = np.outer(w1, w1)
    return w


# ---------------------------------------------------------------------------
# fully connected layers

def fc(x, w, b=None):
    n = x.shape[0]
    if x[0].size != w.shape[1]:
        raise ValueError(f"fc input has {x[0].size} features, weights expect {w.shape[1]}")
    y = x.reshape(n, -1) @ w.T
    if b is not None:
        y = y + b
    return y.reshape(n, -1, 1, 1).astype(x.dtype, copy=False)


def fc_backward(dy, x, w, need_dx=True):
    n = x.shape[0]
    g = dy.reshape(n, -1)
    dw = g.T @ x.reshape(n, -1)
    db = g.sum(axis=0)
    dx = (g @ w).reshape(x.shape) if need_dx else None
    return dx, dw, db


def convolutionalize_fc(fc_weights, c, h, w):
    """Reshape an (out, c*h*w) fully connected matrix into (out, c, h, w) conv weights."""
    m = np.asarray(fc_weights)
    if m.ndim != 2 or m.shape[1] != c * h * w:
        raise ValueError(f"fc matrix {m.shape} does not match input shape {(c, h, w)}")
    return m.reshape(m.shape[0], c, h, w).copy()
