"""Differentiable layer primitives on dense NHWC arrays.

Every operation comes as a ``*_forward`` returning ``(output, cache)`` and a
matching ``*_backward`` that consumes the upstream gradient plus the cache and
returns gradients shaped exactly like the primal operands.  Activations are
``batch x height x width x channels``; conv kernels are
``kh x kw x in_channels x out_channels``.  Forward and backward passes raise
:class:`NumericFault` if they produce NaN or Inf.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

BN_EPS = 1e-3
BN_MOMENTUM = 0.9  # fraction of the running statistic retained per update


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the layer's hyperparameters."""


class NumericFault(ArithmeticError):
    """A layer or optimizer step produced non-finite values."""


def _require_finite(op: str, *arrays) -> None:
    for arr in arrays:
        if arr is not None and not np.isfinite(arr).all():
            raise NumericFault(f"{op} produced non-finite values")


def _pad_pair(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"'same' padding requires odd kernel sizes, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if isinstance(padding, int):
        if padding < 0:
            raise ShapeError(f"padding must be non-negative, got {padding}")
        return padding, padding
    raise ShapeError(f"padding must be 'same' or a non-negative int, got {padding!r}")


def _out_dim(size: int, k: int, pad: int, stride: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(
            f"window {k} with stride {stride} and padding {pad} does not fit input size {size}"
        )
    return out


def _im2col(x_pad: Tensor, kh: int, kw: int, stride: int, oh: int, ow: int) -> Tensor:
    """Gather sliding windows into ``(n, oh, ow, kh, kw, c)``."""
    n, _, _, c = x_pad.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x_pad.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x_pad[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    return cols


def _col2im(cols: Tensor, x_pad_shape: tuple, stride: int) -> Tensor:
    """Scatter-add window gradients back onto the padded input grid."""
    _, oh, ow, kh, kw, _ = cols.shape
    out = np.zeros(x_pad_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += cols[:, :, :, i, j, :]
    return out


def conv2d_forward(x: Tensor, weights: Tensor, bias=None, stride: int = 1, padding="same"):
    """2-D cross-correlation over an NHWC batch.

    Args:
        x: input of shape ``(n, h, w, in_channels)``.
        weights: kernel of shape ``(kh, kw, in_channels, out_channels)``.
        bias: optional per-output-channel offset of shape ``(out_channels,)``.
        stride: positive step shared by both spatial axes.
        padding: ``'same'`` (odd kernels only) or a symmetric pixel count.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d NHWC input, got shape {x.shape}")
    if weights.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d kernel, got shape {weights.shape}")
    kh, kw, cin, cout = weights.shape
    if x.shape[3] != cin:
        raise ShapeError(
            f"conv2d input has {x.shape[3]} channels (shape {x.shape}) but the kernel "
            f"expects {cin} (shape {weights.shape})"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    ph, pw = _pad_pair(padding, kh, kw)
    n, h, w, _ = x.shape
    oh = _out_dim(h, kh, ph, stride)
    ow = _out_dim(w, kw, pw, stride)
    x_pad = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x
    cols = _im2col(x_pad, kh, kw, stride, oh, ow)
    cols_mat = cols.reshape(n * oh * ow, kh * kw * cin)
    y = cols_mat @ weights.reshape(kh * kw * cin, cout)
    if bias is not None:
        y = y + bias
    y = y.reshape(n, oh, ow, cout)
    _require_finite("conv2d", y)
    cache = (cols_mat, weights, x.shape, x_pad.shape, (ph, pw), stride, bias is not None)
    return y, cache


def conv2d_backward(grad_out: Tensor, cache):
    cols_mat, weights, x_shape, x_pad_shape, (ph, pw), stride, has_bias = cache
    kh, kw, cin, cout = weights.shape
    n, oh, ow, _ = grad_out.shape
    g = grad_out.reshape(n * oh * ow, cout)
    grad_w = (cols_mat.T @ g).reshape(kh, kw, cin, cout)
    grad_b = g.sum(axis=0) if has_bias else None
    grad_cols = (g @ weights.reshape(kh * kw * cin, cout).T).reshape(n, oh, ow, kh, kw, cin)
    grad_x_pad = _col2im(grad_cols, x_pad_shape, stride)
    if ph or pw:
        grad_x = grad_x_pad[:, ph : ph + x_shape[1], pw : pw + x_shape[2], :]
    else:
        grad_x = grad_x_pad
    _require_finite("conv2d backward", grad_x, grad_w, grad_b)
    return grad_x, grad_w, grad_b


def maxpool2d_forward(x: Tensor, window: int, stride: int, padding: int = 0):
    """Max pooling; ties route to the first window cell in row-major order.

    Padding cells are filled with -inf so they never win the max and never
    receive gradient.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d NHWC input, got shape {x.shape}")
    if window < 1 or stride < 1:
        raise ShapeError(f"window and stride must be positive, got {window}, {stride}")
    if padding < 0 or padding >= window:
        raise ShapeError(f"maxpool2d padding must lie in [0, window), got {padding}")
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} is larger than input {h}x{w}")
    oh = _out_dim(h, window, padding, stride)
    ow = _out_dim(w, window, padding, stride)
    if padding:
        x_pad = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)),
                       constant_values=-np.inf)
    else:
        x_pad = x
    cols = _im2col(x_pad, window, window, stride, oh, ow)
    flat = cols.reshape(n, oh, ow, window * window, c)
    idx = flat.argmax(axis=3)
    y = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3).squeeze(3)
    _require_finite("maxpool2d", y)
    cache = (idx, x.shape, x_pad.shape, window, stride, padding)
    return y, cache


def maxpool2d_backward(grad_out: Tensor, cache):
    idx, x_shape, x_pad_shape, window, stride, padding = cache
    n, oh, ow, c = grad_out.shape
    flat = np.zeros((n, oh, ow, window * window, c), dtype=grad_out.dtype)
    np.put_along_axis(flat, idx[:, :, :, None, :], grad_out[:, :, :, None, :], axis=3)
    cols = flat.reshape(n, oh, ow, window, window, c)
    grad_pad = _col2im(cols, x_pad_shape, stride)
    if padding:
        grad_x = grad_pad[:, padding : padding + x_shape[1], padding : padding + x_shape[2], :]
    else:
        grad_x = grad_pad
    _require_finite("maxpool2d backward", grad_x)
    return grad_x


def avgpool2d_forward(x: Tensor, window: int, stride: int):
    """Average pooling with no padding."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d expects a 4-d NHWC input, got shape {x.shape}")
    if window < 1 or stride < 1:
        raise ShapeError(f"window and stride must be positive, got {window}, {stride}")
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} is larger than input {h}x{w}")
    oh = _out_dim(h, window, 0, stride)
    ow = _out_dim(w, window, 0, stride)
    cols = _im2col(x, window, window, stride, oh, ow)
    y = cols.mean(axis=(3, 4))
    _require_finite("avgpool2d", y)
    cache = (x.shape, window, stride)
    return y, cache


def avgpool2d_backward(grad_out: Tensor, cache):
    x_shape, window, stride = cache
    n, oh, ow, c = grad_out.shape
    share = grad_out / (window * window)
    cols = np.broadcast_to(share[:, :, :, None, None, :], (n, oh, ow, window, window, c))
    grad_x = _col2im(np.ascontiguousarray(cols), x_shape, stride)
    _require_finite("avgpool2d backward", grad_x)
    return grad_x


def global_avgpool_forward(x: Tensor):
    """Mean over both spatial axes, keeping a 1x1 spatial footprint."""
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects a 4-d NHWC input, got shape {x.shape}")
    y = x.mean(axis=(1, 2), keepdims=True)
    _require_finite("global_avgpool", y)
    return y, x.shape


def global_avgpool_backward(grad_out: Tensor, cache):
    x_shape = cache
    _, h, w, _ = x_shape
    grad_x = np.broadcast_to(grad_out / (h * w), x_shape).copy()
    _require_finite("global_avgpool backward", grad_x)
    return grad_x


def batchnorm_forward(x: Tensor, gamma, beta, running_mean, running_var, mode: str,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics and updates ``running_mean`` /
    ``running_var`` in place (the one mutation in this module); infer mode
    normalizes with the running statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    c = x.shape[-1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm {name} shape {arr.shape} does not match {c} channels")
    if not (running_var > 0).all():
        raise ValueError("batchnorm running_var must be strictly positive")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batchnorm train mode needs batch size >= 2 "
                             "(variance is undefined for a single sample)")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    _require_finite("batchnorm", y)
    cache = (xhat, inv_std, gamma, mode)
    return y, cache


def batchnorm_backward(grad_out: Tensor, cache):
    xhat, inv_std, gamma, mode = cache
    axes = tuple(range(grad_out.ndim - 1))
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    if mode == "train":
        m = np.prod([grad_out.shape[a] for a in axes])
        dxhat = grad_out * gamma
        grad_x = (inv_std / m) * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
    else:
        grad_x = grad_out * gamma * inv_std
    grad_x = grad_x.astype(grad_out.dtype, copy=False)
    _require_finite("batchnorm backward", grad_x, grad_gamma, grad_beta)
    return grad_x, grad_gamma, grad_beta


def relu_forward(x: Tensor):
    y = np.maximum(x, 0)
    _require_finite("relu", y)
    return y, x > 0


def relu_backward(grad_out: Tensor, cache):
    grad_x = grad_out * cache
    _require_finite("relu backward", grad_x)
    return grad_x


def dense_forward(x: Tensor, weights: Tensor, bias=None):
    """Fully connected layer; flattens any trailing input dimensions."""
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense input flattens to {flat.shape} but weights are {weights.shape}"
        )
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} does not match {weights.shape[1]} units")
    y = flat @ weights
    if bias is not None:
        y = y + bias
    _require_finite("dense", y)
    cache = (flat, weights, x.shape, bias is not None)
    return y, cache


def dense_backward(grad_out: Tensor, cache):
    flat, weights, x_shape, has_bias = cache
    grad_w = flat.T @ grad_out
    grad_b = grad_out.sum(axis=0) if has_bias else None
    grad_x = (grad_out @ weights.T).reshape(x_shape)
    _require_finite("dense backward", grad_x, grad_w, grad_b)
    return grad_x, grad_w, grad_b


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Tensor):
    """Mean cross-entropy between softmax(logits) and one-hot labels.

    Returns ``(loss, grad_logits)`` where ``grad_logits`` is
    ``(softmax(logits) - labels) / batch``.
    """
    if logits.ndim != 2 or logits.shape != labels.shape:
        raise ShapeError(
            f"softmax_cross_entropy needs matching 2-d arrays, got logits {logits.shape} "
            f"and labels {labels.shape}"
        )
    if not np.isin(labels, (0, 1)).all() or not (labels.sum(axis=1) == 1).all():
        raise ValueError("labels must be one-hot rows (exactly one 1 per row)")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_z - (shifted * labels).sum(axis=1)).mean())
    grad = (softmax(logits) - labels) / n
    grad = grad.astype(logits.dtype, copy=False)
    if not np.isfinite(loss):
        raise NumericFault("softmax_cross_entropy produced a non-finite loss")
    _require_finite("softmax_cross_entropy backward", grad)
    return loss, grad
