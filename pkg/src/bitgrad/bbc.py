"""MLP-based binarizer: a two-way classifier in the forward pass that doubles
as a learnable gradient estimator in the backward pass.

One classifier instance is shared by every binarized layer of a network.
Forward, each latent weight element is classified into {0,1} by argmax over
two logits and shifted to {-1,+1}. Backward, the hard argmax is replaced by
the differentiable logit margin S(w) = z1(w) - z0(w): the gradient reaching
a binarized weight is 2 * upstream * S'(w), and the classifier's own
parameters receive 2 * upstream * dS/dtheta, summed over all weight elements
in fixed layer order.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError
from .estimators import GradEstimator
from .ops import DTYPE
from .params import Parameter

ACTIVATIONS = ("none", "tanh", "relu")

# default 1-layer init: margin slope 0.5, end-to-end gain 2 * 0.5 = 1,
# i.e. the classifier starts out equivalent to unclipped straight-through
INIT_A1 = 0.25
INIT_A0 = -0.25


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, DTYPE(0))
    return x


def _act_grad(name, x):
    if name == "tanh":
        t = np.tanh(x)
        return 1 - t * t
    if name == "relu":
        return (x > 0).astype(DTYPE)
    return np.ones_like(x)


class MlpClassifier:
    """Shared two-logit MLP over scalar weight inputs.

    num_layers=1 is a single linear stage (2 neurons); num_layers=2 inserts a
    hidden stage of `hidden_width` units. The activation, when present, sits
    after the first linear stage. Output dimension is always 2.
    """

    def __init__(self, num_layers: int = 1, hidden_width: int = 100,
                 activation: str = "none", rng: np.random.Generator | None = None):
        if num_layers not in (1, 2):
            raise ConfigError(f"bbc.layers must be 1 or 2, got {num_layers}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"bbc.activation must be one of {ACTIVATIONS}, got {activation}")
        if num_layers == 2 and hidden_width < 1:
            raise ConfigError(f"bbc.hidden_width must be >= 1, got {hidden_width}")
        self.num_layers = num_layers
        self.hidden_width = hidden_width
        self.activation = activation
        if num_layers == 1:
            self.w_out = Parameter("bbc.w_out", [INIT_A0, INIT_A1], theta=True)
            self.b_out = Parameter("bbc.b_out", [0.0, 0.0], theta=True)
            self.w_in = None
            self.b_in = None
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            h = hidden_width
            w_in = rng.standard_normal(h).astype(DTYPE)
            u = rng.standard_normal(h).astype(DTYPE) / np.sqrt(h, dtype=DTYPE)
            self.w_in = Parameter("bbc.w_in", w_in, theta=True)
            self.b_in = Parameter("bbc.b_in", np.zeros(h), theta=True)
            self.w_out = Parameter("bbc.w_out", np.stack([-u / 2, u / 2]), theta=True)
            self.b_out = Parameter("bbc.b_out", [0.0, 0.0], theta=True)
            # rescale the antisymmetric output stage so training starts at
            # end-to-end gain 1, matching the 1-layer initialization
            coeff = self.effective_coefficient()
            if abs(coeff) > 1e-8:
                self.w_out.value /= DTYPE(coeff)

    def params(self) -> list[Parameter]:
        ps = [self.w_out, self.b_out]
        if self.num_layers == 2:
            ps = [self.w_in, self.b_in] + ps
        return ps

    # -- forward ------------------------------------------------------------

    def logits(self, w: np.ndarray):
        """Per-element class logits (z0, z1), each shaped like w."""
        x = w[..., None]  # broadcast scalar input against stage weights
        if self.num_layers == 1:
            z = x * self.w_out.value + self.b_out.value
            z = _act(self.activation, z)
        else:
            pre = x * self.w_in.value + self.b_in.value
            hid = _act(self.activation, pre)
            z = hid @ self.w_out.value.T + self.b_out.value
        return z[..., 0], z[..., 1]

    def margin(self, w: np.ndarray) -> np.ndarray:
        """Differentiable surrogate S(w) = z1(w) - z0(w) for the argmax path."""
        if self.num_layers == 1 and self.activation == "none":
            dv = self.w_out.value[1] - self.w_out.value[0]
            db = self.b_out.value[1] - self.b_out.value[0]
            return dv * w + db
        z0, z1 = self.logits(w)
        return z1 - z0

    def classify(self, w: np.ndarray) -> np.ndarray:
        """Binarize latent weights: argmax of the two logits, shifted to {-1,+1}.

        The z0 == z1 tie resolves to class 1 (+1), mirroring sign(0) = +1.
        """
        s = self.margin(w)
        if not np.all(np.isfinite(s)):
            raise NumericError("bbc classifier produced non-finite logits")
        return np.where(s >= 0, DTYPE(1), DTYPE(-1))

    # -- backward -----------------------------------------------------------

    def margin_grad(self, w: np.ndarray) -> np.ndarray:
        """dS/dw, element-wise."""
        if self.num_layers == 1:
            if self.activation == "none":
                dv = self.w_out.value[1] - self.w_out.value[0]
                return np.full_like(w, dv)
            z = w[..., None] * self.w_out.value + self.b_out.value
            sg = _act_grad(self.activation, z)
            return sg[..., 1] * self.w_out.value[1] - sg[..., 0] * self.w_out.value[0]
        pre = w[..., None] * self.w_in.value + self.b_in.value
        dv = self.w_out.value[1] - self.w_out.value[0]
        if self.activation == "none":
            return np.full_like(w, dv @ self.w_in.value)
        return (dv * _act_grad(self.activation, pre)) @ self.w_in.value

    def backward(self, w: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Gradient reaching the latent weights: (2 * upstream) * dS/dw."""
        return (2 * upstream) * self.margin_grad(w)

    def accumulate_theta_grad(self, w: np.ndarray, upstream: np.ndarray):
        """Add this tensor's contribution to the shared parameters' gradients.

        Contributions are summed in whatever order layers call this; the
        trainer walks layers in a fixed reverse order, so accumulation is
        deterministic.
        """
        u2 = (2 * upstream).ravel().astype(DTYPE, copy=False)
        wf = w.ravel().astype(DTYPE, copy=False)
        if self.num_layers == 1:
            if self.activation == "none":
                sw = float(u2 @ wf)
                su = float(u2.sum())
                self.w_out.grad += np.array([-sw, sw], dtype=DTYPE)
                self.b_out.grad += np.array([-su, su], dtype=DTYPE)
            else:
                z = wf[:, None] * self.w_out.value + self.b_out.value
                sg = _act_grad(self.activation, z)  # (M, 2)
                sgn = sg * np.array([-1.0, 1.0], dtype=DTYPE)
                self.w_out.grad += (u2 * wf) @ sgn
                self.b_out.grad += u2 @ sgn
            return
        pre = wf[:, None] * self.w_in.value + self.b_in.value  # (M, H)
        hid = _act(self.activation, pre)
        dv = self.w_out.value[1] - self.w_out.value[0]
        uh = u2 @ hid  # (H,)
        self.w_out.grad += np.stack([-uh, uh])
        su = float(u2.sum())
        self.b_out.grad += np.array([-su, su], dtype=DTYPE)
        dpre = _act_grad(self.activation, pre) * dv  # (M, H)
        self.w_in.grad += (u2 * wf) @ dpre
        self.b_in.grad += u2 @ dpre

    # -- monitoring ---------------------------------------------------------

    def effective_coefficient(self) -> float:
        """End-to-end gradient gain of the estimator.

        For the 1-layer linear configuration this is exactly 2 * (a1 - a0);
        1 means the classifier reproduces unclipped straight-through.
        Other configurations report the surrogate slope 2 * S'(w) averaged
        over the fixed probe grid w in {-1, -0.9, ..., 1}.
        """
        if self.num_layers == 1 and self.activation == "none":
            return float(2 * (self.w_out.value[1] - self.w_out.value[0]))
        probe = np.linspace(-1, 1, 21).astype(DTYPE)
        return float(np.mean(2 * self.margin_grad(probe)))


class BbcEstimator(GradEstimator):
    """Estimator facade over a shared MlpClassifier.

    weight_grad also deposits the classifier-parameter gradients, since both
    derive from the same upstream per Algorithm-style training: one backward
    visit per binarized tensor per step.
    """

    name = "bbc"

    def __init__(self, classifier: MlpClassifier, train_theta: bool = True):
        self.classifier = classifier
        self.train_theta = train_theta

    def binarize(self, w):
        return self.classifier.classify(w)

    def weight_grad(self, w, upstream):
        if self.train_theta:
            self.classifier.accumulate_theta_grad(w, upstream)
        return self.classifier.backward(w, upstream)
