"""Dense-tensor compute kernels with explicit forward/backward pairs.

All ops are pure functions on float32 numpy arrays: inputs are never
mutated, and every op has a hand-wired backward companion instead of a
graph-based autodiff. Reduction order is fixed, so results are
reproducible run-to-run on one machine.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

DTYPE = np.float32


def f32(x) -> np.ndarray:
    """Coerce to a contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")
    return x


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a[m,k] and b[k,n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of matmul w.r.t. both operands given upstream g[m,n]."""
    if g.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(f"matmul_backward: upstream shape {g.shape} does not match output")
    return g @ b.T, a.T @ g


# ---------------------------------------------------------------------------
# conv2d (im2col + matmul)
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold x[N,C,H,W] into rows of receptive fields, one row per output position.

    Returns an array of shape (N*OH*OW, C*kh*kw). Row ordering is
    (n, oh, ow) row-major; column ordering is (c, i, j) row-major, which is
    also the layout the packed inference engine uses.
    """
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"im2col: kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * kh * kw)


def col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add the inverse of im2col: fold row gradients back onto the input."""
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    g6 = gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(gpad[:, :, pad:pad + h, pad:pad + w])
    return gpad


def conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1, pad: int = 0,
           cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlate x[N,C,H,W] with k[O,C,kh,kw].

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1. Pass a
    precomputed `cols` (from im2col) to skip the unfold.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    n, _, h, w = x.shape
    o, _, kh, kw = k.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if cols is None:
        cols = im2col(x, kh, kw, stride, pad)
    out = cols @ k.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))


def conv2d_backward(g: np.ndarray, x: np.ndarray, k: np.ndarray, stride: int = 1,
                    pad: int = 0, cols: np.ndarray | None = None,
                    need_input_grad: bool = True):
    """Gradients of conv2d w.r.t. input and kernel.

    Returns (gx, gk); gx is None when need_input_grad is False (first layer).
    """
    o, c, kh, kw = k.shape
    if cols is None:
        cols = im2col(x, kh, kw, stride, pad)
    g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
    gk = (g2d.T @ cols).reshape(k.shape)
    gx = None
    if need_input_grad:
        gcols = g2d @ k.reshape(o, -1)
        gx = col2im(gcols, x.shape, kh, kw, stride, pad)
    return gx, gk


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")


def batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Per-channel batch normalization using batch statistics.

    Returns (out, mean, var, xhat, inv_std); mean/var are the biased batch
    statistics the caller folds into its running estimates.
    """
    if eps <= 0:
        raise ShapeError("batchnorm: eps must be > 0")
    axes, bshape = _bn_axes(x)
    if gamma.size == 0:
        raise ShapeError("batchnorm: zero channel count")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, mean, var, xhat, inv_std


def batchnorm_infer(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                    mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize with frozen running statistics."""
    _, bshape = _bn_axes(x)
    inv_std = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def batchnorm_backward(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, gamma: np.ndarray):
    """Gradients of batchnorm_train w.r.t. input, gamma, and beta."""
    axes, bshape = _bn_axes(g)
    m = DTYPE(g.size // gamma.size)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    gi = gamma.reshape(bshape) * inv_std.reshape(bshape)
    gx = gi * (g - (dbeta / m).reshape(bshape) - xhat * (dgamma / m).reshape(bshape))
    return gx, dgamma, dbeta


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    labels are integer class indices in [0, C). The gradient is
    (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects [N,C] logits")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    nll = np.log(denom[:, 0]) - z[np.arange(n), labels]
    loss = float(nll.mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= DTYPE(n)
    return loss, grad.astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0))


def relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, g, DTYPE(0))


def prelu(x: np.ndarray, slope: np.ndarray) -> np.ndarray:
    """Channel-wise PReLU: x for x > 0, slope[c] * x otherwise."""
    _, bshape = _bn_axes(x)
    return np.where(x > 0, x, x * slope.reshape(bshape))


def prelu_backward(g: np.ndarray, x: np.ndarray, slope: np.ndarray):
    axes, bshape = _bn_axes(x)
    gx = np.where(x > 0, g, g * slope.reshape(bshape))
    gslope = np.where(x > 0, DTYPE(0), g * x).sum(axis=axes)
    return gx, gslope


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_check(x, window, stride):
    if x.ndim != 4:
        raise ShapeError("pooling expects 4-D input")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ShapeError("pooling: window and stride must be >= 1")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"pooling window {window} does not fit input {h}x{w}")
    return n, c, h, w, oh, ow


def _pool_tiles(x, window):
    # non-overlapping fast path: (N,C,H,W) -> (N,C,OH,OW,window*window)
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    t = x.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    return t.reshape(n, c, oh, ow, window * window)


def maxpool2d(x: np.ndarray, window: int, stride: int | None = None) -> np.ndarray:
    """Max pooling; ties resolve to the first element in row-major window order."""
    stride = window if stride is None else stride
    n, c, h, w, oh, ow = _pool_check(x, window, stride)
    if stride == window and h % window == 0 and w % window == 0:
        return _pool_tiles(x, window).max(axis=-1)
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(n, c, oh, ow, -1).max(axis=-1)


def maxpool2d_backward(g: np.ndarray, x: np.ndarray, window: int,
                       stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    n, c, h, w, oh, ow = _pool_check(x, window, stride)
    if stride == window and h % window == 0 and w % window == 0:
        tiles = _pool_tiles(x, window)
        idx = tiles.argmax(axis=-1)
        gt = np.zeros_like(tiles)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        gt = gt.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(gt.reshape(x.shape))
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    idx = win.reshape(n, c, oh, ow, -1).argmax(axis=-1)
    ni, ci, oi, oj = np.indices((n, c, oh, ow))
    rows = oi * stride + idx // window
    cols = oj * stride + idx % window
    gx = np.zeros_like(x)
    np.add.at(gx, (ni, ci, rows, cols), g)
    return gx


def avgpool2d(x: np.ndarray, window: int, stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    n, c, h, w, oh, ow = _pool_check(x, window, stride)
    if stride == window and h % window == 0 and w % window == 0:
        return _pool_tiles(x, window).mean(axis=-1)
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(n, c, oh, ow, -1).mean(axis=-1)


def avgpool2d_backward(g: np.ndarray, x: np.ndarray, window: int,
                       stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    n, c, h, w, oh, ow = _pool_check(x, window, stride)
    share = g / DTYPE(window * window)
    if stride == window and h % window == 0 and w % window == 0:
        gt = np.broadcast_to(share[..., None], (n, c, oh, ow, window * window))
        gt = gt.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(gt.reshape(x.shape))
    gx = np.zeros_like(x)
    for i in range(window):
        for j in range(window):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
    return gx


# ---------------------------------------------------------------------------
# shape / arithmetic glue
# ---------------------------------------------------------------------------

def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def add_backward(g: np.ndarray):
    return g, g


def flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def flatten_backward(g: np.ndarray, x_shape) -> np.ndarray:
    return g.reshape(x_shape)
