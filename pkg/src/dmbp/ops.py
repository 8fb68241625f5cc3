"""Dense tensor primitives with explicit forward and backward kernels.

float32 is the working precision; float64 is the verification mode used by
tests that need finite-difference-tight tolerances.  There is no autodiff
graph: every backward kernel is written out by hand next to its forward
counterpart, and convolution is accumulated directly over kernel offsets
rather than lowered to im2col, so the im2col route stays available as an
independent oracle.

Layout conventions: feature maps are (channels, height, width), vectors are
(features,), dense weights are (out_features, in_features), convolution
weights are (out_channels, in_channels, kh, kw).  Convolution is
cross-correlation (no kernel flip) with zero padding, and output extents must
divide exactly: (H + 2*pad - kh) % stride == 0.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, NumericError

DEFAULT_DTYPE = np.float32

# Contiguous row-major float32/float64 carrier.  numpy enforces the
# shape/storage invariants; finiteness is checked at module boundaries.
Tensor = np.ndarray


def as_tensor(values, dtype=None) -> Tensor:
    """Validate an array-like at a module boundary.

    Rejects NaN/Inf and returns a C-contiguous float32 or float64 array.
    Arrays already in a float dtype keep it unless ``dtype`` overrides.
    """
    arr = np.asarray(values)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite values rejected at module boundary")
    return arr


def _as_pair(value, name: str) -> Tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        value = (int(value), int(value))
    pair = tuple(int(v) for v in value)
    if len(pair) != 2 or any(v < 0 for v in pair):
        raise DimensionError(f"{name} must be a non-negative int or pair, got {value!r}")
    return pair


def _exact_extent(size: int, kernel: int, pad: int, stride: int, what: str) -> int:
    if stride <= 0:
        raise DimensionError(f"{what}: stride must be positive, got {stride}")
    span = size + 2 * pad - kernel
    if span < 0:
        raise DimensionError(f"{what}: kernel {kernel} exceeds padded extent {size + 2 * pad}")
    if span % stride != 0:
        raise DimensionError(
            f"{what}: output extent ({size} + 2*{pad} - {kernel}) / {stride} is not integral"
        )
    return span // stride + 1


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product.  Inner extents must agree."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def conv2d_forward(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride=1,
    pad=0,
) -> Tensor:
    """Strided 2-D cross-correlation with zero padding.

    x: (C, H, W), w: (Co, C, kh, kw), b: (Co,) or None.  Accumulates one
    tensordot per kernel offset; output extents must divide exactly.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects x (C,H,W) and w (Co,Ci,kh,kw), got {x.shape}, {w.shape}")
    c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    sh, sw = _as_pair(stride, "stride")
    ph, pw = _as_pair(pad, "pad")
    ho = _exact_extent(h, kh, ph, sh, "conv2d height")
    wo = _exact_extent(wd, kw, pw, sw, "conv2d width")
    if b is not None and b.shape != (co,):
        raise DimensionError(f"conv2d bias shape {b.shape} does not match {co} output channels")

    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    out = np.zeros((co, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            window = xp[:, u : u + sh * (ho - 1) + 1 : sh, v : v + sw * (wo - 1) + 1 : sw]
            out += np.tensordot(w[:, :, u, v], window, axes=([1], [0]))
    if b is not None:
        out += b[:, None, None]
    return out


def conv2d_backward(
    grad_out: Tensor,
    w: Tensor,
    x_shape: Tuple[int, int, int],
    stride=1,
    pad=0,
) -> Tuple[Tensor, Tensor]:
    """Gradients of conv2d_forward wrt input and bias.

    Returns (grad_input, grad_bias) where grad_input is the transpose map of
    the forward correlation and grad_bias is the per-channel sum of grad_out.
    """
    c, h, wd = x_shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d_backward channel mismatch: {ci} vs {c}")
    sh, sw = _as_pair(stride, "stride")
    ph, pw = _as_pair(pad, "pad")
    ho = _exact_extent(h, kh, ph, sh, "conv2d height")
    wo = _exact_extent(wd, kw, pw, sw, "conv2d width")
    if grad_out.shape != (co, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match conv output {(co, ho, wo)}")

    gxp = np.zeros((c, h + 2 * ph, wd + 2 * pw), dtype=grad_out.dtype)
    for u in range(kh):
        for v in range(kw):
            gxp[:, u : u + sh * (ho - 1) + 1 : sh, v : v + sw * (wo - 1) + 1 : sw] += np.tensordot(
                w[:, :, u, v], grad_out, axes=([0], [0])
            )
    grad_input = gxp[:, ph : ph + h, pw : pw + wd]
    if ph or pw:
        grad_input = np.ascontiguousarray(grad_input)
    grad_bias = grad_out.sum(axis=(1, 2))
    return grad_input, grad_bias


def relu_forward(x: Tensor) -> Tuple[Tensor, Tensor]:
    """ReLU and its Heaviside mask with H(0) = 0.

    Returns (x * mask, mask) where mask = 1 where x > 0 else 0.
    """
    mask = (x > 0).astype(x.dtype)
    return x * mask, mask


def _pool_patches(x: Tensor, k: int, s: int, what: str):
    c, h, w = x.shape
    if k <= 0:
        raise DimensionError(f"{what}: window must be positive, got {k}")
    ho = _exact_extent(h, k, 0, s, f"{what} height")
    wo = _exact_extent(w, k, 0, s, f"{what} width")
    sc, sh_, sw_ = x.strides
    patches = as_strided(
        x,
        shape=(c, ho, wo, k, k),
        strides=(sc, sh_ * s, sw_ * s, sh_, sw_),
        writeable=False,
    )
    return patches, ho, wo


def maxpool_forward(x: Tensor, k: int, stride: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """Max pooling over k x k windows.

    Returns (pooled, idx) where idx holds, per output element, the flat index
    of the selected input element within (C, H, W).  Ties select the first
    maximum in row-major window order, so the backward routing is unique.
    """
    s = k if stride is None else int(stride)
    c, h, w = x.shape
    patches, ho, wo = _pool_patches(x, k, s, "maxpool")
    flat = patches.reshape(c, ho, wo, k * k)
    rel = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, rel[..., None], axis=-1)[..., 0]
    oy = np.arange(ho)[None, :, None] * s + rel // k
    ox = np.arange(wo)[None, None, :] * s + rel % k
    idx = (np.arange(c)[:, None, None] * h + oy) * w + ox
    return np.ascontiguousarray(out), idx


def maxpool_backward(grad_out: Tensor, idx: Tensor, x_shape: Tuple[int, int, int]) -> Tensor:
    """Scatter grad_out back to the argmax positions recorded by the forward."""
    if grad_out.shape != idx.shape:
        raise DimensionError(f"maxpool_backward: grad {grad_out.shape} vs idx {idx.shape}")
    grad_input = np.zeros(int(np.prod(x_shape)), dtype=grad_out.dtype)
    np.add.at(grad_input, idx.ravel(), grad_out.ravel())
    return grad_input.reshape(x_shape)


def avgpool_forward(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Mean pooling over k x k windows."""
    s = k if stride is None else int(stride)
    patches, _, _ = _pool_patches(x, k, s, "avgpool")
    return np.ascontiguousarray(patches.mean(axis=(3, 4)))


def avgpool_backward(grad_out: Tensor, k: int, x_shape: Tuple[int, int, int], stride: Optional[int] = None) -> Tensor:
    """Distribute grad_out / k^2 uniformly over each pooling window."""
    s = k if stride is None else int(stride)
    c, h, w = x_shape
    ho = _exact_extent(h, k, 0, s, "avgpool height")
    wo = _exact_extent(w, k, 0, s, "avgpool width")
    if grad_out.shape != (c, ho, wo):
        raise DimensionError(f"avgpool_backward: grad {grad_out.shape} vs expected {(c, ho, wo)}")
    grad_input = np.zeros(x_shape, dtype=grad_out.dtype)
    share = grad_out / (k * k)
    for u in range(k):
        for v in range(k):
            grad_input[:, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s] += share
    return grad_input
