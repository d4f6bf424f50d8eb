"""Differentiable layers used by the encoder and the temporal decoder.

Layout conventions: 2D activations are ``(N, C, H, W)``; 3D activations are
``(N, C, T, H, W)``. 2D kernels are ``(C_out, C_in, k_h, k_w)`` and 3D kernels
are ``(C_out, C_in, k_h, k_w, k_t)`` with the temporal tap last.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericalDegeneracyError, ShapeError, ValidationError
from .tensor import Tensor, as_tensor, make_result

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
WN_EPS = 1e-12


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _tap_slices(tap, dilation, stride, out_shape):
    return tuple(
        slice(t * d, t * d + s * (o - 1) + 1, s) for t, d, s, o in zip(tap, dilation, stride, out_shape)
    )


def _conv_nd(x: Tensor, w_data_internal: np.ndarray, stride, padding, dilation):
    """Channel-major im2col. Returns ``cols`` of shape ``(C * K, N * prod(S_out))`` and backward metadata."""
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    o, ci = w_data_internal.shape[:2]
    kshape = w_data_internal.shape[2:]
    if ci != c:
        raise ShapeError(f"input has {c} channels but kernel expects {ci} (input shape {x.shape})")
    out_shape = tuple(
        _conv_out_size(s, k, st, p, d) for s, k, st, p, d in zip(spatial, kshape, stride, padding, dilation)
    )
    if any(s <= 0 for s in out_shape):
        raise ConfigurationError(
            f"convolution of input {x.shape} with kernel {kshape} (stride {stride}, padding {padding}, "
            f"dilation {dilation}) has empty output {out_shape}"
        )
    xc = x.data.swapaxes(0, 1)
    if any(padding):
        xc = np.pad(xc, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    taps = list(itertools.product(*[range(k) for k in kshape]))
    cols = np.empty((c, len(taps), n) + out_shape, dtype=x.dtype)
    for k, tap in enumerate(taps):
        cols[:, k] = xc[(slice(None), slice(None)) + _tap_slices(tap, dilation, stride, out_shape)]
    meta = (x.shape, xc.shape, out_shape, taps, padding, dilation, stride)
    return cols.reshape(c * len(taps), -1), meta


def _conv_backward_input(dcols: np.ndarray, meta, dtype) -> np.ndarray:
    x_shape, xc_shape, out_shape, taps, padding, dilation, stride = meta
    n, c = x_shape[:2]
    dcols = dcols.reshape((c, len(taps), n) + out_shape)
    dxc = np.zeros(xc_shape, dtype=dtype)
    for k, tap in enumerate(taps):
        dxc[(slice(None), slice(None)) + _tap_slices(tap, dilation, stride, out_shape)] += dcols[:, k]
    if any(padding):
        crop = tuple(slice(p, p + s) for p, s in zip(padding, x_shape[2:]))
        dxc = dxc[(slice(None), slice(None)) + crop]
    return np.ascontiguousarray(dxc.swapaxes(0, 1))


def _conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride, padding, dilation, to_internal, from_internal):
    w_int = to_internal(weight.data)
    cols, meta = _conv_nd(x, w_int, stride, padding, dilation)
    o = w_int.shape[0]
    wm = w_int.reshape(o, -1)
    out = wm @ cols
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
        out += bias.data[:, None]
    n = x.shape[0]
    out_shape = meta[2]
    out = np.ascontiguousarray(out.reshape((o, n) + out_shape).swapaxes(0, 1))
    w_int_shape = w_int.shape

    def back(g):
        gm = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(o, -1)
        gx = _conv_backward_input(wm.T @ gm, meta, x.dtype) if x.requires_grad else None
        gw = from_internal((gm @ cols.T).reshape(w_int_shape)) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1) if bias.requires_grad else None)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back)


def _pair(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ConfigurationError(f"expected {n} values, got {v}")
    return v


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2D cross-correlation. ``padding`` is an int, an (h, w) pair, or ``"same"`` (odd kernels, stride 1)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    kh, kw = weight.shape[2:]
    if padding == "same":
        padding = ((kh - 1) // 2, (kw - 1) // 2)
    return _conv(
        x, weight, bias, _pair(stride, 2), _pair(padding, 2), (1, 1), lambda w: w, lambda w: w
    )


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    dilation_t: int = 1,
    padding="same",
) -> Tensor:
    """3D cross-correlation over (T, H, W) with dilation on the temporal axis only.

    ``padding="same"`` zero-pads ``dilation_t * (k_t - 1) / 2`` frames on each
    side in time and ``(k - 1) / 2`` pixels spatially, so the output keeps the
    input's (T, H, W). Otherwise ``padding`` is a (t, h, w) triple or an int.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and kernel, got {x.shape} and {weight.shape}")
    if dilation_t < 1:
        raise ConfigurationError(f"dilation_t must be positive, got {dilation_t}")
    kh, kw, kt = weight.shape[2:]
    if padding == "same":
        if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError(f"'same' padding needs odd kernel sizes, got {weight.shape[2:]}")
        padding = (dilation_t * (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2)
    return _conv(
        x,
        weight,
        bias,
        (1, 1, 1),
        _pair(padding, 3),
        (dilation_t, 1, 1),
        lambda w: w.transpose(0, 1, 4, 2, 3),
        lambda w: np.ascontiguousarray(w.transpose(0, 1, 3, 4, 2)),
    )


# ---------------------------------------------------------------------------
# normalisation


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation over every axis except axis 1.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, like most
    frameworks). In eval mode the running statistics are used.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},), got {scale.shape} and {shift.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gamma = scale.data.reshape(bshape)
    if training:
        count = x.data.size // c
        if count < 1:
            raise ValidationError("batch_norm needs at least one element per channel")
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(bshape)
        out = xhat * gamma + shift.data.reshape(bshape)

        def back(g):
            gs = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = None
            if x.requires_grad:
                gx = (gamma * inv_std.reshape(bshape) / count) * (
                    count * g - gb.reshape(bshape) - xhat * gs.reshape(bshape)
                )
            return gx, gs, gb

    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * inv_std.reshape(bshape)
        out = xhat * gamma + shift.data.reshape(bshape)

        def back(g):
            gx = g * (gamma * inv_std.reshape(bshape)) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out.astype(x.dtype, copy=False), (x, scale, shift), back)


def weight_norm(direction: Tensor, magnitude: Tensor, eps: float = WN_EPS) -> Tensor:
    """Effective weights ``magnitude[o] * direction[o] / ||direction[o]||``."""
    o = direction.shape[0]
    if magnitude.shape != (o,):
        raise ShapeError(f"magnitude must have shape ({o},), got {magnitude.shape}")
    v = direction.data
    axes = tuple(range(1, v.ndim))
    bshape = (o,) + (1,) * (v.ndim - 1)
    norm = np.sqrt((v * v).sum(axis=axes))
    if np.any(norm <= eps):
        bad = np.flatnonzero(norm <= eps).tolist()
        raise NumericalDegeneracyError(f"direction has (near) zero norm for output channels {bad}")
    unit = v / norm.reshape(bshape)
    g_mag = magnitude.data.reshape(bshape)

    def back(g):
        g_magnitude = (g * unit).sum(axis=axes)
        g_dir = (g_mag / norm.reshape(bshape)) * (g - unit * g_magnitude.reshape(bshape))
        return g_dir, g_magnitude

    return make_result(unit * g_mag, (direction, magnitude), back)


# ---------------------------------------------------------------------------
# activations and losses


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    p = np.exp(_log_softmax(x.data, axis))

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), back)


def softmax_over_channels(x: Tensor) -> Tensor:
    return softmax(x, axis=1 if x.ndim >= 4 else 0)


def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    frame_weight: Sequence[float] | np.ndarray | None = None,
) -> Tensor:
    """Mean over weighted pixels of ``-log softmax(logits)[label]``.

    Three-axis ``logits`` are one unbatched ``(C, H, W)`` map with ``(H, W)``
    labels; four or more axes are batched, ``(N, C, ...)`` with ``labels``
    shaped ``(N, ...)``. ``frame_weight``
    holds one weight per frame of the first non-channel axis after the batch
    axis (the temporal axis for ``(N, C, T, H, W)``). Pixels of zero-weight
    frames get exactly zero gradient and their labels are never read.
    """
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = logits.reshape((1,) + logits.shape)
        labels = labels[None]
    if logits.shape[:1] + logits.shape[2:] != labels.shape:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    c = logits.shape[1]
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got {labels.dtype}")
    weights = np.ones(labels.shape, dtype=logits.dtype)
    if frame_weight is not None:
        fw = np.asarray(frame_weight, dtype=logits.dtype)
        if labels.ndim < 2 or fw.shape != (labels.shape[1],):
            raise ShapeError(f"frame_weight shape {fw.shape} does not match frame axis of labels {labels.shape}")
        weights = weights * fw.reshape((1, -1) + (1,) * (labels.ndim - 2))
    active = weights != 0
    if not active.any():
        raise ValidationError("cross_entropy with all-zero weights is undefined")
    used = labels[active]
    if used.min() < 0 or used.max() >= c:
        raise ValidationError(f"labels must lie in [0, {c}), got range [{used.min()}, {used.max()}]")

    logp = _log_softmax(logits.data, axis=1)
    logp_last = np.moveaxis(logp, 1, -1)
    picked = logp_last[active, used]
    w = weights[active]
    total = w.sum()
    loss = -(w * picked).sum() / total

    def back(g):
        grad = np.zeros_like(logp_last)
        probs = np.exp(logp_last[active])
        probs[np.arange(used.size), used] -= 1.0
        grad[active] = probs * (w / total)[:, None]
        return (np.ascontiguousarray(np.moveaxis(grad, -1, 1)) * g,)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# resampling


def bilinear_matrix(size_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix ``(size_in * factor, size_in)`` with half-pixel (align-corners false) centres."""
    size_out = size_in * factor
    src = (np.arange(size_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, None)
    i0 = np.minimum(np.floor(src).astype(int), size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = src - i0
    m = np.zeros((size_out, size_in), dtype=dtype)
    rows = np.arange(size_out)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_upsample2d(x: Tensor, factor: int) -> Tensor:
    """Upsample the last two axes by an integer ``factor``."""
    if factor < 1 or int(factor) != factor:
        raise ConfigurationError(f"upsample factor must be a positive integer, got {factor}")
    if x.ndim < 2:
        raise ShapeError(f"bilinear_upsample2d needs at least 2 axes, got {x.shape}")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    h, w = x.shape[-2:]
    ah = bilinear_matrix(h, factor, x.dtype)
    aw = bilinear_matrix(w, factor, x.dtype)
    out = ah @ x.data @ aw.T
    return make_result(out, (x,), lambda g: (ah.T @ g @ aw,))


__all__ = [
    "as_tensor",
    "batch_norm",
    "bilinear_upsample2d",
    "conv2d",
    "conv3d",
    "cross_entropy",
    "relu",
    "softmax",
    "softmax_over_channels",
    "weight_norm",
]
