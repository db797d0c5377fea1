"""Differentiable operations over :class:`Tensor`.

Every op computes its forward value with numpy and, when recorded on a
tape, a closure mapping the output gradient to input gradients. Reductions
run in a fixed order so results are bitwise reproducible.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, as_tensor, make_result

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid")
LOSS_KINDS = ("l1_mean", "mse")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _pads4(padding) -> tuple[int, int, int, int]:
    """Normalize padding to (top, bottom, left, right)."""
    if isinstance(padding, (tuple, list)) and len(padding) == 4:
        return tuple(int(p) for p in padding)  # type: ignore[return-value]
    ph, pw = _pair(padding)
    return ph, ph, pw, pw


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """TensorFlow-style 'same' zero padding: output extent is ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = a.shape, a.dtype
    return make_result(np.sum(a.data, dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    return make_result(np.mean(a.data, dtype=dtype), (a,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data).astype(x.dtype)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    y = np.logaddexp(0, x.data).astype(x.dtype)
    s = expit(x.data).astype(x.dtype)
    return make_result(y, (x,), lambda g: (g * s,))


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------- convolution

def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """View (N, C, Ho, Wo, kh, kw) of strided kh x kw windows."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _scatter_windows(cols: np.ndarray, out: np.ndarray, sh: int, sw: int) -> None:
    """Adjoint of :func:`_windows`; ``cols`` is (N, Ho, Wo, C, kh, kw), added into ``out``."""
    _, ho, wo, _, kh, kw = cols.shape
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + (ho - 1) * sh + 1 : sh, b : b + (wo - 1) * sw + 1 : sw] += cols[
                :, :, :, :, a, b
            ].transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation with zero padding.

    ``weight`` is (Cout, Cin, kh, kw); ``padding`` is an int, an (h, w) pair
    or explicit (top, bottom, left, right) amounts.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    sh, sw = _pair(stride)
    if sh <= 0 or sw <= 0:
        raise ValueError(f"conv2d: stride must be positive, got {(sh, sw)}")
    pt, pb, pl, pr = _pads4(padding)
    hp, wp = h + pt + pb, w + pl + pr
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    win = _windows(xp, kh, kw, sh, sw, ho, wo)
    wd = weight.data
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            cols = np.tensordot(g, wd, axes=([1], [0]))  # N,Ho,Wo,Cin,kh,kw
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            _scatter_windows(cols, gxp, sh, sw)
            gx = gxp[:, :, pt : pt + h, pl : pl + w]
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, inputs, backward)


def conv2d_transpose(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, output_padding=0
) -> Tensor:
    """Transposed convolution; ``weight`` is (Cin, Cout, kh, kw).

    Output extent is (H - 1) * stride - 2 * padding + k + output_padding.
    Its forward pass is the input gradient of :func:`conv2d` with the same
    weight array and hyperparameters.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d_transpose expects 4-D input and weight")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d_transpose: input has {cin} channels, weight expects {wcin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if sh <= 0 or sw <= 0:
        raise ValueError("conv2d_transpose: stride must be positive")
    if not (0 <= oph < sh and 0 <= opw < sw):
        raise ValueError(f"output_padding {(oph, opw)} must be smaller than stride {(sh, sw)}")
    hfull, wfull = (h - 1) * sh + kh, (w - 1) * sw + kw
    ho, wo = hfull - 2 * ph + oph, wfull - 2 * pw + opw
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d_transpose: padding too large")
    hb, wb = max(hfull, ph + ho), max(wfull, pw + wo)

    wd = weight.data
    cols = np.tensordot(x.data, wd, axes=([1], [0]))  # N,H,W,Cout,kh,kw
    buf = np.zeros((n, cout, hb, wb), dtype=x.dtype)
    _scatter_windows(cols, buf, sh, sw)
    out = buf[:, :, ph : ph + ho, pw : pw + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    xd = x.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gbuf = np.zeros((n, cout, hb, wb), dtype=g.dtype)
        gbuf[:, :, ph : ph + ho, pw : pw + wo] = g
        win = _windows(gbuf[:, :, :hfull, :wfull], kh, kw, sh, sw, h, w)  # N,Cout,H,W,kh,kw
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, inputs, backward)


# ---------------------------------------------------------------- normalization

def instance_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial plane."""
    if x.ndim != 4:
        raise ValueError("instance_norm expects (N, C, H, W)")
    n, c, h, w = x.shape
    if h * w < 2:
        raise ValueError("instance_norm needs at least two pixels per plane")
    if gain.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"instance_norm: gain/shift must have shape ({c},)")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data.reshape(1, c, 1, 1)
    out = (xhat * gd + shift.data.reshape(1, c, 1, 1)).astype(x.dtype)

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            m1 = dxhat.mean(axis=(2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        ggain = (g * xhat).sum(axis=(0, 2, 3)) if gain.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        return gx, ggain, gshift

    return make_result(out, (x, gain, shift), backward)


# ---------------------------------------------------------------- padding / pooling

def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.arange(-before, n + after)
    idx = np.abs(idx)
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def reflection_pad(x: Tensor, pads) -> Tensor:
    """Mirror padding without repeating the edge pixel; ``pads`` = (top, bottom, left, right)."""
    pt, pb, pl, pr = _pads4(pads)
    n, c, h, w = x.shape
    if max(pt, pb) >= h or max(pl, pr) >= w or min(pt, pb, pl, pr) < 0:
        raise ValueError(f"reflection pad {(pt, pb, pl, pr)} too large for plane {h}x{w}")
    if not (pt or pb or pl or pr):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    out = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="reflect")
    rows = np.zeros((h + pt + pb, h), dtype=x.dtype)
    rows[np.arange(h + pt + pb), _reflect_index(h, pt, pb)] = 1
    cols = np.zeros((w + pl + pr, w), dtype=x.dtype)
    cols[np.arange(w + pl + pr), _reflect_index(w, pl, pr)] = 1
    return make_result(out, (x,), lambda g: (rows.T @ g @ cols,))


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"max_pool2d: plane {h}x{w} smaller than window {size}")
    blocks = x.data[:, :, : ho * size, : wo * size].reshape(n, c, ho, size, wo, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, : ho * size, : wo * size] = gb
        return (gx,)

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.shape
    return make_result(
        x.data.mean(axis=(2, 3)), (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)
    )


# ---------------------------------------------------------------- style / losses

def gram_matrix(features: Tensor) -> Tensor:
    """Channel correlation matrices normalized by C * H * W; (N, C, H, W) -> (N, C, C)."""
    n, c, h, w = features.shape
    norm = features.dtype.type(c * h * w)
    f = features.data.reshape(n, c, h * w)
    out = (f @ f.transpose(0, 2, 1)) / norm

    def backward(g):
        return (((g + g.transpose(0, 2, 1)) @ f / norm).reshape(n, c, h, w),)

    return make_result(out, (features,), backward)


def reduce_loss(a: Tensor, b, kind: str = "l1_mean") -> Tensor:
    """Scalar ``mean(|a - b|)`` (``l1_mean``) or ``mean((a - b) ** 2)`` (``mse``)."""
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"reduce_loss: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    nelem = d.size
    if kind == "l1_mean":
        value = np.mean(np.abs(d), dtype=a.dtype)
        sgn = np.sign(d)

        def backward(g):
            ga = g * sgn / nelem
            return ga, -ga
    elif kind == "mse":
        value = np.mean(d * d, dtype=a.dtype)

        def backward(g):
            ga = g * 2 * d / nelem
            return ga, -ga
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return make_result(np.asarray(value, dtype=a.dtype), (a, b), backward)
