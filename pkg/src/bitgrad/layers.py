"""Layer objects: stateful wrappers over the pure kernels in ops.py.

Each layer caches what its hand-wired backward needs during forward and
accumulates parameter gradients into Parameter.grad. A network instance is
confined to a single training thread.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError
from .estimators import GradEstimator, scale_factor, sign_binarize, ste_grad
from .ops import DTYPE
from .params import Parameter


class Layer:
    name = "layer"

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Parameter]:
        return []


class BinaryConvLayer(Layer):
    """Convolution over latent float weights with optional 1-bit operands.

    With binarize_weight set, the forward pass runs the estimator's binarizer
    over the latent weights, rescales each output channel by the mean
    absolute latent value (recomputed every forward), and convolves; the
    backward pass routes the weight gradient through the estimator and the
    activation gradient through clipped straight-through. With both flags
    clear this is a plain full-precision convolution.
    """

    def __init__(self, name, in_ch, out_ch, kernel, stride=1, pad=0,
                 estimator: GradEstimator | None = None,
                 binarize_input=False, binarize_weight=False,
                 rng: np.random.Generator | None = None, needs_input_grad=True):
        self.name = name
        self.stride = stride
        self.pad = pad
        self.estimator = estimator
        self.binarize_input = binarize_input
        self.binarize_weight = binarize_weight
        self.needs_input_grad = needs_input_grad
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_ch * kernel * kernel
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.w = Parameter(f"{name}.w", w, decay=not binarize_weight, binary=binarize_weight)
        self.alpha = np.ones(out_ch, dtype=DTYPE)
        self._cache = None

    def params(self):
        return [self.w]

    def forward(self, x, train):
        a_hat = sign_binarize(x) if self.binarize_input else x
        if self.binarize_weight:
            w_hat = self.estimator.binarize(self.w.value)
            self.alpha = scale_factor(self.w.value)
        else:
            w_hat = self.w.value
        kh = w_hat.shape[2]
        cols = ops.im2col(a_hat, kh, w_hat.shape[3], self.stride, self.pad)
        out = ops.conv2d(a_hat, w_hat, self.stride, self.pad, cols=cols)
        if self.binarize_weight:
            out = out * self.alpha.reshape(1, -1, 1, 1)
        self._cache = (x, a_hat, w_hat, cols)
        return out

    def backward(self, g):
        x, a_hat, w_hat, cols = self._cache
        if self.binarize_weight:
            g = g * self.alpha.reshape(1, -1, 1, 1)  # alpha is a constant in backward
        gx_hat, gw_hat = ops.conv2d_backward(g, a_hat, w_hat, self.stride, self.pad,
                                             cols=cols, need_input_grad=self.needs_input_grad)
        if self.binarize_weight:
            self.w.grad += self.estimator.weight_grad(self.w.value, gw_hat)
        else:
            self.w.grad += gw_hat
        if not self.needs_input_grad:
            return None
        if self.binarize_input:
            return ste_grad(x, gx_hat)
        return gx_hat


class BinaryLinear(Layer):
    """Fully-connected analogue of BinaryConvLayer (row-per-output weights)."""

    def __init__(self, name, in_features, out_features,
                 estimator: GradEstimator | None = None,
                 binarize_input=False, binarize_weight=False,
                 rng: np.random.Generator | None = None):
        self.name = name
        self.estimator = estimator
        self.binarize_input = binarize_input
        self.binarize_weight = binarize_weight
        rng = np.random.default_rng(0) if rng is None else rng
        w = rng.standard_normal((out_features, in_features)) * np.sqrt(2.0 / in_features)
        self.w = Parameter(f"{name}.w", w, decay=not binarize_weight, binary=binarize_weight)
        self.alpha = np.ones(out_features, dtype=DTYPE)
        self._cache = None

    def params(self):
        return [self.w]

    def forward(self, x, train):
        a_hat = sign_binarize(x) if self.binarize_input else x
        if self.binarize_weight:
            w_hat = self.estimator.binarize(self.w.value)
            self.alpha = scale_factor(self.w.value)
            out = (a_hat @ w_hat.T) * self.alpha
        else:
            w_hat = self.w.value
            out = a_hat @ w_hat.T
        self._cache = (x, a_hat, w_hat)
        return out

    def backward(self, g):
        x, a_hat, w_hat = self._cache
        if self.binarize_weight:
            g = g * self.alpha
        gx_hat, gw_t = ops.matmul_backward(g, a_hat, w_hat.T)
        gw_hat = gw_t.T
        if self.binarize_weight:
            self.w.grad += self.estimator.weight_grad(self.w.value, gw_hat)
        else:
            self.w.grad += gw_hat
        if self.binarize_input:
            return ste_grad(x, gx_hat)
        return gx_hat


class Linear(Layer):
    """Full-precision affine layer with bias."""

    def __init__(self, name, in_features, out_features, rng=None):
        self.name = name
        rng = np.random.default_rng(0) if rng is None else rng
        w = rng.standard_normal((out_features, in_features)) * np.sqrt(2.0 / in_features)
        self.w = Parameter(f"{name}.w", w, decay=True)
        self.b = Parameter(f"{name}.b", np.zeros(out_features))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train):
        if x.ndim != 2:
            raise ShapeError(f"{self.name}: expected flattened input, got {x.shape}")
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, g):
        gx, gw_t = ops.matmul_backward(g, self._x, self.w.value.T)
        self.w.grad += gw_t.T
        self.b.grad += g.sum(axis=0)
        return gx


class BatchNorm(Layer):
    """Per-channel batch normalization with running statistics (kept full-precision)."""

    def __init__(self, name, channels, eps=1e-5, momentum=0.1):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train):
        if train:
            out, mean, var, xhat, inv_std = ops.batchnorm_train(
                x, self.gamma.value, self.beta.value, self.eps)
            m = DTYPE(self.momentum)
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
            self._cache = (xhat, inv_std)
            return out
        return ops.batchnorm_infer(x, self.gamma.value, self.beta.value,
                                   self.running_mean, self.running_var, self.eps)

    def backward(self, g):
        xhat, inv_std = self._cache
        gx, dgamma, dbeta = ops.batchnorm_backward(g, xhat, inv_std, self.gamma.value)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return gx


class PReLU(Layer):
    def __init__(self, name, channels, init=0.25):
        self.name = name
        self.slope = Parameter(f"{name}.slope", np.full(channels, init))
        self._x = None

    def params(self):
        return [self.slope]

    def forward(self, x, train):
        self._x = x
        return ops.prelu(x, self.slope.value)

    def backward(self, g):
        gx, gslope = ops.prelu_backward(g, self._x, self.slope.value)
        self.slope.grad += gslope
        return gx


class MaxPool(Layer):
    def __init__(self, name, window, stride=None):
        self.name = name
        self.window = window
        self.stride = window if stride is None else stride
        self._x = None

    def forward(self, x, train):
        self._x = x
        return ops.maxpool2d(x, self.window, self.stride)

    def backward(self, g):
        return ops.maxpool2d_backward(g, self._x, self.window, self.stride)


class AvgPool(Layer):
    """Average pooling; window=None means global (whole spatial extent)."""

    def __init__(self, name, window=None, stride=None):
        self.name = name
        self.window = window
        self.stride = stride
        self._x = None

    def _resolve(self, x):
        win = x.shape[2] if self.window is None else self.window
        return win, (win if self.stride is None else self.stride)

    def forward(self, x, train):
        self._x = x
        win, stride = self._resolve(x)
        return ops.avgpool2d(x, win, stride)

    def backward(self, g):
        win, stride = self._resolve(self._x)
        return ops.avgpool2d_backward(g, self._x, win, stride)


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name
        self._shape = None

    def forward(self, x, train):
        self._shape = x.shape
        return ops.flatten(x)

    def backward(self, g):
        return ops.flatten_backward(g, self._shape)


class BiRealBlock(Layer):
    """Two binary convolutions with batch norm, an identity shortcut added
    after each, and an optional full-precision avgpool + 1x1-conv downsample
    on the first shortcut when shape changes."""

    def __init__(self, name, in_ch, out_ch, stride, estimator, rng):
        self.name = name
        self.conv1 = BinaryConvLayer(f"{name}.conv1", in_ch, out_ch, 3, stride, 1,
                                     estimator, binarize_input=True, binarize_weight=True,
                                     rng=rng)
        self.bn1 = BatchNorm(f"{name}.bn1", out_ch)
        self.conv2 = BinaryConvLayer(f"{name}.conv2", out_ch, out_ch, 3, 1, 1,
                                     estimator, binarize_input=True, binarize_weight=True,
                                     rng=rng)
        self.bn2 = BatchNorm(f"{name}.bn2", out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = [
                AvgPool(f"{name}.ds.pool", stride, stride),
                BinaryConvLayer(f"{name}.ds.conv", in_ch, out_ch, 1, 1, 0, rng=rng),
                BatchNorm(f"{name}.ds.bn", out_ch),
            ]

    def params(self):
        ps = self.conv1.params() + self.bn1.params() + self.conv2.params() + self.bn2.params()
        if self.downsample:
            for l in self.downsample:
                ps += l.params()
        return ps

    def forward(self, x, train):
        if self.downsample:
            idt = x
            for l in self.downsample:
                idt = l.forward(idt, train)
        else:
            idt = x
        y = self.bn1.forward(self.conv1.forward(x, train), train)
        y = ops.add(y, idt)
        z = self.bn2.forward(self.conv2.forward(y, train), train)
        return ops.add(z, y)

    def backward(self, g):
        gy = self.conv2.backward(self.bn2.backward(g)) + g
        gx = self.conv1.backward(self.bn1.backward(gy))
        gidt = gy
        if self.downsample:
            for l in reversed(self.downsample):
                gidt = l.backward(gidt)
        return gx + gidt
