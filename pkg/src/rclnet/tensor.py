"""
Hand-written numeric kernels: 2-D convolution, max pooling and the dense
product, each with a paired backward pass.

Tensors are plain ``numpy.ndarray`` objects laid out channel-first. Kernels
accept either a single sample ``C x H x W`` or a batch ``B x C x H x W`` and
return the same rank they were given. Height is the time axis (window rows),
width the flattened-frame axis.

Convolution is cross-correlation (no kernel flip):

    Y[b, k, i, j] = sum_{c, p, q} Xpad[b, c, i*sh + p, j*sw + q] * K[k, c, p, q] + bias[k]

    H' = (H + 2*pad_h - kh) // stride_h + 1
    W' = (W + 2*pad_w - kw) // stride_w + 1
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError

DEFAULT_DTYPE = np.float32


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int = 3
    kernel_w: int = 3
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride_h, self.stride_w) < 1:
            raise ConfigurationError(f"kernel and stride extents must be >= 1: {self}")
        if min(self.pad_h, self.pad_w) < 0:
            raise ConfigurationError(f"padding must be >= 0: {self}")

    def output_extent(self, h, w):
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        return oh, ow


@dataclass(frozen=True)
class PoolSpec:
    """Max-pool window. ``pool_w``/``stride_w`` act on the width axis,
    ``pool_h``/``stride_h`` on the height (time) axis."""

    pool_w: int = 1
    pool_h: int = 1
    stride_w: int = 1
    stride_h: int = 1

    def __post_init__(self):
        if min(self.pool_w, self.pool_h, self.stride_w, self.stride_h) < 1:
            raise ConfigurationError(f"pool and stride extents must be >= 1: {self}")

    def output_extent(self, h, w):
        return (h - self.pool_h) // self.stride_h + 1, (w - self.pool_w) // self.stride_w + 1


def _as_batch(x, name="input"):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name} must be C x H x W or B x C x H x W, got shape {x.shape}")


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _patches(xpad, spec, oh, ow):
    """Strided view of shape B x C x H' x W' x kh x kw (no copy)."""
    win = sliding_window_view(xpad, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    return win[:, :, : (oh - 1) * spec.stride_h + 1 : spec.stride_h, : (ow - 1) * spec.stride_w + 1 : spec.stride_w]


def _check_conv(x, kernels, bias, spec):
    b, c, h, w = x.shape
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be K x C x kh x kw, got shape {kernels.shape}")
    k, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"input has {c} channels but kernels expect {kc}")
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise DimensionError(f"kernel extents {(kh, kw)} disagree with spec {(spec.kernel_h, spec.kernel_w)}")
    if bias is not None and np.shape(bias) != (k,):
        raise DimensionError(f"bias must have shape ({k},), got {np.shape(bias)}")
    oh, ow = spec.output_extent(h, w)
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"convolution output extent {(oh, ow)} from input {(h, w)} under {spec}")
    return oh, ow


def conv2d(x, kernels, bias, spec=ConvSpec()):
    """Zero-padded 2-D cross-correlation. ``bias`` may be None."""
    x, single = _as_batch(x)
    kernels = np.asarray(kernels)
    oh, ow = _check_conv(x, kernels, bias, spec)
    b = x.shape[0]
    k = kernels.shape[0]
    if spec.kernel_h == spec.kernel_w == 1 and spec.stride_h == spec.stride_w == 1 and spec.pad_h == spec.pad_w == 0:
        out = np.einsum("kc,bchw->bkhw", kernels[:, :, 0, 0], x, optimize=True)
    else:
        cols = _patches(_pad(x, spec.pad_h, spec.pad_w), spec, oh, ow)
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, -1)
        out = (cols @ kernels.reshape(k, -1).T).reshape(b, oh, ow, k).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + np.asarray(bias).reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    return out[0] if single else out


def conv2d_backward(grad_out, x, kernels, spec=ConvSpec()):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias."""
    x, single = _as_batch(x)
    grad_out, _ = _as_batch(grad_out, "grad_out")
    kernels = np.asarray(kernels)
    oh, ow = _check_conv(x, kernels, None, spec)
    b, c, h, w = x.shape
    k = kernels.shape[0]
    if grad_out.shape != (b, k, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output {(b, k, oh, ow)}")
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    if spec.kernel_h == spec.kernel_w == 1 and spec.stride_h == spec.stride_w == 1 and spec.pad_h == spec.pad_w == 0:
        k2 = kernels[:, :, 0, 0]
        grad_k = np.einsum("bkhw,bchw->kc", grad_out, x, optimize=True).reshape(kernels.shape)
        grad_x = np.einsum("kc,bkhw->bchw", k2, grad_out, optimize=True)
        grad_x = grad_x.astype(x.dtype, copy=False)
        return (grad_x[0] if single else grad_x), grad_k.astype(kernels.dtype, copy=False), grad_bias

    xpad = _pad(x, spec.pad_h, spec.pad_w)
    cols = _patches(xpad, spec, oh, ow).transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, -1)
    gmat = grad_out.transpose(0, 2, 3, 1).reshape(b * oh * ow, k)
    grad_k = (gmat.T @ cols).reshape(kernels.shape)
    dcols = (gmat @ kernels.reshape(k, -1)).reshape(b, oh, ow, c, spec.kernel_h, spec.kernel_w)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # b, c, kh, kw, oh, ow
    gpad = np.zeros_like(xpad)
    sh, sw = spec.stride_h, spec.stride_w
    for p in range(spec.kernel_h):
        for q in range(spec.kernel_w):
            gpad[:, :, p : p + sh * (oh - 1) + 1 : sh, q : q + sw * (ow - 1) + 1 : sw] += dcols[:, :, p, q]
    grad_x = gpad[:, :, spec.pad_h : spec.pad_h + h, spec.pad_w : spec.pad_w + w]
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x[0] if single else grad_x), grad_k.astype(kernels.dtype, copy=False), grad_bias


def maxpool2d(x, spec):
    """Max pooling with floor semantics.

    Returns ``(output, argmax)`` where ``argmax`` holds, per output cell,
    the row-major index into the input's H x W plane of the winning element.
    Ties go to the lowest index.
    """
    x, single = _as_batch(x)
    b, c, h, w = x.shape
    if spec.pool_h > h or spec.pool_w > w:
        raise ConfigurationError(f"pool {(spec.pool_h, spec.pool_w)} larger than input {(h, w)}")
    oh, ow = spec.output_extent(h, w)
    if spec.pool_h == spec.pool_w == 1:
        view = x[:, :, : (oh - 1) * spec.stride_h + 1 : spec.stride_h, : (ow - 1) * spec.stride_w + 1 : spec.stride_w]
        out = np.ascontiguousarray(view)
        local = np.zeros(out.shape, dtype=np.intp)
    else:
        win = sliding_window_view(x, (spec.pool_h, spec.pool_w), axis=(2, 3))
        win = win[:, :, : (oh - 1) * spec.stride_h + 1 : spec.stride_h, : (ow - 1) * spec.stride_w + 1 : spec.stride_w]
        flat = win.reshape(b, c, oh, ow, spec.pool_h * spec.pool_w)
        local = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh).reshape(oh, 1) * spec.stride_h + local // spec.pool_w
    cols = np.arange(ow).reshape(1, ow) * spec.stride_w + local % spec.pool_w
    argmax = rows * w + cols
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2d_backward(grad_out, argmax, input_shape):
    """Route each output gradient to its argmax position in the input."""
    grad_out = np.asarray(grad_out)
    if grad_out.shape != argmax.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != argmax shape {argmax.shape}")
    single = len(input_shape) == 3
    shape4 = (1, *input_shape) if single else tuple(input_shape)
    b, c, h, w = shape4
    plane = np.arange(b * c).reshape(b, c, 1, 1) * (h * w)
    flat_idx = (argmax.reshape(b, c, *argmax.shape[-2:]) + plane).ravel()
    grad = np.bincount(flat_idx, weights=grad_out.ravel(), minlength=b * c * h * w)
    grad = grad.astype(grad_out.dtype, copy=False).reshape(shape4)
    return grad[0] if single else grad


def dense(x, weights, bias):
    """Affine map ``W x + b`` on a vector ``D`` or a batch ``B x D``."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"input width {x.shape[-1]} does not match weights {weights.shape}")
    if np.shape(bias) != (weights.shape[0],):
        raise DimensionError(f"bias must have shape ({weights.shape[0]},), got {np.shape(bias)}")
    return x @ weights.T + bias


def dense_backward(grad_out, x, weights):
    """Returns ``(grad_x, grad_weights, grad_bias)``."""
    grad_out = np.asarray(grad_out)
    x = np.asarray(x)
    if grad_out.shape[-1] != weights.shape[0] or grad_out.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"grad_out shape {grad_out.shape} inconsistent with input {x.shape} and weights {weights.shape}")
    grad_x = grad_out @ weights
    if x.ndim == 1:
        return grad_x, np.outer(grad_out, x), grad_out.copy()
    return grad_x, grad_out.T @ x, grad_out.sum(axis=0)
