"""Binarization forward functions and their backward gradient estimators.

The forward side of every non-MLP estimator is the same hard sign; the
estimators differ only in the surrogate derivative they substitute for
sign's zero-almost-everywhere gradient. Soft surrogates apply to weights
only; activations always binarize with sign and backpropagate through the
clipped straight-through rule.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .errors import ConfigError
from .ops import DTYPE

log = logging.getLogger(__name__)


def sign_binarize(x: np.ndarray) -> np.ndarray:
    """Element-wise binarization: +1 where x >= 0, else -1."""
    return np.where(x >= 0, DTYPE(1), DTYPE(-1))


def ste_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Clipped straight-through gradient: upstream where |x| <= 1, else 0."""
    return np.where(np.abs(x) <= 1, upstream, DTYPE(0))


def scale_factor(w: np.ndarray) -> np.ndarray:
    """Per-output-channel scaling: mean absolute value of each channel.

    Channels are rows of w flattened along its leading axis; a 1-D array is
    treated as a single channel. An all-zero channel yields alpha = 0 and a
    logged warning, since the layer's output collapses.
    """
    flat = w.reshape(1, -1) if w.ndim == 1 else w.reshape(w.shape[0], -1)
    if flat.shape[1] < 1:
        raise ConfigError("scale_factor: channel must have at least one element")
    alpha = np.abs(flat).mean(axis=1).astype(DTYPE)
    if np.any(alpha == 0):
        log.warning("scale_factor: %d all-zero channel(s), output will collapse",
                    int((alpha == 0).sum()))
    return alpha


def _finite_positive(name, *vals):
    for v in vals:
        if not math.isfinite(v) or v <= 0:
            raise ConfigError(f"{name}: parameters must be finite and positive, got {v}")


class GradEstimator:
    """Base estimator: hard-sign forward, subclass-specific weight gradient."""

    name = "?"

    def binarize(self, w: np.ndarray) -> np.ndarray:
        return sign_binarize(w)

    def weight_grad(self, w: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def epoch_update(self, epoch: int, total_epochs: int):
        """Advance any parameter schedule; called once per epoch by the trainer."""


class Ste(GradEstimator):
    """Eq.-style clipped straight-through estimator."""

    name = "ste"

    def weight_grad(self, w, upstream):
        return ste_grad(w, upstream)


class SteUnclipped(GradEstimator):
    """Identity pass-through with no clipping region (the coefficient-1 linear case)."""

    name = "ste_unclipped"

    def weight_grad(self, w, upstream):
        return upstream


class SoftEstimator(GradEstimator):
    """Common shape of the soft-function family: analytic surrogate derivative."""

    def surrogate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def surrogate_grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def weight_grad(self, w, upstream):
        return upstream * self.surrogate_grad(w)


class TanhSoft(SoftEstimator):
    """y = k * tanh(t * x), with k and t optionally annealed per epoch.

    The default schedule raises t log-linearly from 1 to 10 over training
    and keeps k = max(1/t, 1).
    """

    name = "tanh"

    def __init__(self, k: float = 1.0, t: float = 1.0, schedule: bool = True):
        _finite_positive("TanhSoft", k, t)
        self.k = DTYPE(k)
        self.t = DTYPE(t)
        self.schedule = schedule

    def set_params(self, k: float, t: float):
        _finite_positive("TanhSoft", k, t)
        self.k = DTYPE(k)
        self.t = DTYPE(t)

    def epoch_update(self, epoch, total_epochs):
        if not self.schedule or total_epochs < 2:
            return
        progress = epoch / (total_epochs - 1)
        t = 10.0 ** progress
        self.set_params(max(1.0 / t, 1.0), t)

    def surrogate(self, x):
        return self.k * np.tanh(self.t * x)

    def surrogate_grad(self, x):
        th = np.tanh(self.t * x)
        return self.k * self.t * (1 - th * th)


class PolySoft(SoftEstimator):
    """Odd piecewise-polynomial surrogate y = r * (-sign(x) * 3*q^2*x^2/4 + sqrt(3)*q*x)."""

    name = "poly"

    def __init__(self, r: float = 1.0, q: float = 1.0):
        _finite_positive("PolySoft", r, q)
        self.r = DTYPE(r)
        self.q = DTYPE(q)

    def surrogate(self, x):
        s = sign_binarize(x)
        return self.r * (-s * 0.75 * self.q ** 2 * x * x + DTYPE(math.sqrt(3)) * self.q * x)

    def surrogate_grad(self, x):
        s = sign_binarize(x)
        return self.r * (-s * 1.5 * self.q ** 2 * x + DTYPE(math.sqrt(3)) * self.q)


class RootSoft(SoftEstimator):
    """Root-shaped surrogate y = sign(x)/2 * (2|x|)^a, a in (0, 1].

    Written odd-symmetrically: the (2x)^a form is undefined for negative x
    under fractional exponents.
    """

    name = "root"

    def __init__(self, a_exp: float = 0.8):
        if not math.isfinite(a_exp) or not 0 < a_exp <= 1:
            raise ConfigError(f"RootSoft: a_exp must be in (0, 1], got {a_exp}")
        self.a_exp = DTYPE(a_exp)

    def surrogate(self, x):
        return sign_binarize(x) * 0.5 * (2 * np.abs(x)) ** self.a_exp

    def surrogate_grad(self, x):
        # d/dx [sign(x)/2 * (2|x|)^a] = a * (2|x|)^(a-1) on both sides of 0
        return self.a_exp * (2 * np.abs(x)) ** (self.a_exp - 1)
