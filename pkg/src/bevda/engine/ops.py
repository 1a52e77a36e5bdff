"""Convolutions, normalisation, activations and losses with explicit backward passes."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_output

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid")


# ---------------------------------------------------------------------------
# raw numpy kernels (no tape)

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of shape (N, C, ho, wo, k, k) over an already padded input."""
    view = sliding_window_view(xp, (k, k), axis=(2, 3))
    return view[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def im2col(x: np.ndarray, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (N*ho*wo, C*k*k)."""
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _windows(xp, k, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5)
    return cols.reshape(n * ho * wo, c * k * k)


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int,
               cols: np.ndarray | None = None) -> np.ndarray:
    n, c, h, wd = x.shape
    o, k = w.shape[0], w.shape[2]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if cols is None:
        cols = im2col(x, k, stride, padding, ho, wo)
    out = cols @ w.reshape(o, -1).T  # N*ho*wo, O
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def conv_weight_grad(cols: np.ndarray, g: np.ndarray, w_shape: tuple) -> np.ndarray:
    """d<conv2d(x, w), g>/dw given the patch matrix of ``x``."""
    o = g.shape[1]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (gm.T @ cols).reshape(w_shape)


def conv_transpose_raw(y: np.ndarray, w: np.ndarray, stride: int, padding: int,
                       out_hw: tuple | None = None) -> np.ndarray:
    """Adjoint of :func:`conv2d_raw` in its input argument.

    ``y`` is (N, O, ho, wo) and ``w`` is (O, C, k, k); the result is (N, C, H, W).
    ``out_hw`` pins H, W when the forward convolution floored away trailing rows.
    """
    n, o, ho, wo = y.shape
    c, k = w.shape[1], w.shape[2]
    if out_hw is None:
        out_hw = ((ho - 1) * stride + k - 2 * padding, (wo - 1) * stride + k - 2 * padding)
    if stride == 1 and 2 * o <= c and k - 1 >= padding:
        return _transpose_by_correlation(y, w, padding, out_hw)
    hp = max((ho - 1) * stride + k, out_hw[0] + 2 * padding)
    wp = max((wo - 1) * stride + k, out_hw[1] + 2 * padding)
    ym = y.transpose(1, 0, 2, 3).reshape(o, -1)
    cols = (w.reshape(o, -1).T @ ym).reshape(c, k, k, n, ho, wo)
    acc = np.zeros((c, n, hp, wp))
    for i in range(k):
        rows = slice(i, i + stride * (ho - 1) + 1, stride)
        for j in range(k):
            acc[:, :, rows, j : j + stride * (wo - 1) + 1 : stride] += cols[:, i, j]
    acc = acc[:, :, padding : padding + out_hw[0], padding : padding + out_hw[1]]
    return acc.transpose(1, 0, 2, 3)


def _transpose_by_correlation(y: np.ndarray, w: np.ndarray, padding: int, out_hw: tuple) -> np.ndarray:
    # stride-1 case only: full correlation with the flipped, channel-swapped kernel;
    # cheaper than scattering when y has few channels
    n, o, ho, wo = y.shape
    k = w.shape[2]
    lo = k - 1 - padding
    extra_h = out_hw[0] - (ho + k - 1 - 2 * padding)
    extra_w = out_hw[1] - (wo + k - 1 - 2 * padding)
    buf = np.pad(y, ((0, 0), (0, 0), (lo, lo + extra_h), (lo, lo + extra_w)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_raw(buf, wf, 1, 0)


# ---------------------------------------------------------------------------
# differentiable operations

def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, in_axis: int, out_axis: int,
                stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be NCHW, got {x.shape}", dim="rank")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"weight must be square 4-d, got {w.shape}", dim="kernel")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(f"input has {x.shape[1]} channels but weight expects {w.shape[in_axis]}",
                         dim="channels")
    if b is not None and b.shape != (w.shape[out_axis],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[out_axis]},)", dim="bias")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}", dim="stride")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv(x, w, b, 1, 0, stride, padding)
    h, wd = x.shape[2:]
    k = w.shape[2]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"output extent {ho}x{wo} < 1 for input {h}x{wd}, kernel {k}", dim="spatial")
    wdat = w.data
    need_x, need_w = x.requires_grad, w.requires_grad
    cols = im2col(x.data, k, stride, padding, ho, wo)
    out = conv2d_raw(x.data, wdat, stride, padding, cols=cols)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gx = conv_transpose_raw(g, wdat, stride, padding, out_hw=(h, wd)) if need_x else None
        gw = conv_weight_grad(cols, g, wdat.shape) if need_w else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_output("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; ``w`` is (in_channels, out_channels, k, k)."""
    _check_conv(x, w, b, 0, 1, stride, padding)
    h, wd = x.shape[2:]
    k = w.shape[2]
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wd - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"output extent {ho}x{wo} < 1", dim="spatial")
    xd, wdat = x.data, w.data
    need_x, need_w = x.requires_grad, w.requires_grad
    out = conv_transpose_raw(xd, wdat, stride, padding)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gcols = im2col(g, k, stride, padding, h, wd)
        gx = conv2d_raw(g, wdat, stride, padding, cols=gcols) if need_x else None
        # roles swap: the transposed input plays the conv output gradient
        gw = conv_weight_grad(gcols, xd, wdat.shape) if need_w else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_output("conv_transpose2d", out, inputs, bw)


def pad_reflect(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    h, w = x.shape[2:]
    if pad >= h or pad >= w:
        raise ShapeError(f"reflection pad {pad} too large for {h}x{w}", dim="spatial")
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")

    def bw(g):
        # fold mirrored borders back onto the rows/cols they were copied from
        gr = g[:, :, pad : pad + h, :].copy()
        gr[:, :, 1 : pad + 1][:, :, ::-1] += g[:, :, :pad]
        gr[:, :, h - 1 - pad : h - 1][:, :, ::-1] += g[:, :, pad + h :]
        gx = gr[:, :, :, pad : pad + w].copy()
        gx[:, :, :, 1 : pad + 1][..., ::-1] += gr[:, :, :, :pad]
        gx[:, :, :, w - 1 - pad : w - 1][..., ::-1] += gr[:, :, :, pad + w :]
        return (gx,)

    return make_output("pad_reflect", out, (x,), bw)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects NCHW, got {x.shape}", dim="rank")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)", dim="channels")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]
    need_x = x.requires_grad

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if need_x:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=(2, 3), keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True))
        return gx, gg, gb

    return make_output("instance_norm", out, (x, gamma, beta), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def apply_activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    d = x.data
    if kind == "relu":
        mask = d > 0
        return make_output("relu", d * mask, (x,), lambda g: (g * mask,))
    if kind == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
        scale = np.where(d > 0, 1.0, slope)
        return make_output("leaky_relu", d * scale, (x,), lambda g: (g * scale,))
    if kind == "tanh":
        y = np.tanh(d)
        return make_output("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(d)
        return make_output("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def relu(x):
    return apply_activation(x, "relu")


def leaky_relu(x, slope=0.2):
    return apply_activation(x, "leaky_relu", slope)


def tanh(x):
    return apply_activation(x, "tanh")


def sigmoid(x):
    return apply_activation(x, "sigmoid")


# ---------------------------------------------------------------------------
# losses

def loss_l1(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"loss_l1 shape mismatch {a.shape} vs {b.shape}", dim="shape")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)
    return make_output("loss_l1", np.array(np.abs(diff).mean()), (a, b),
                       lambda g: (sign * (float(g) / n), -sign * (float(g) / n)))


def loss_mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"loss_mse shape mismatch {a.shape} vs {b.shape}", dim="shape")
    diff = a.data - b.data
    n = diff.size
    return make_output("loss_mse", np.array((diff * diff).mean()), (a, b),
                       lambda g: (2.0 * diff * (float(g) / n), -2.0 * diff * (float(g) / n)))


def loss_bce_logits(logits: Tensor, targets, weights=None, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on raw logits, stable for large |z|.

    ``weights`` (same shape, optional) scales each element; ``reduction`` is
    ``"mean"`` over all elements or ``"sum"``.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    t = np.broadcast_to(t, logits.shape)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("BCE targets must lie in [0, 1]")
    z = logits.data
    wts = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, float), z.shape)
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    if reduction == "mean":
        scale = 1.0 / z.size
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    value = np.array((wts * per).sum() * scale)
    return make_output("loss_bce_logits", value, (logits,),
                       lambda g: (wts * (_sigmoid(z) - t) * (float(g) * scale),))
