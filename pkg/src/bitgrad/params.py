"""Named value/gradient pairs, the unit the optimizers operate on."""

from __future__ import annotations

import numpy as np

from .ops import f32


class Parameter:
    """A trainable array with an accumulated gradient of the same shape.

    Flags steer the optimizer: `decay` opts into weight decay (full-precision
    params only), `binary` marks binarized latent weights (clamped after each
    step, never decayed), `theta` marks shared-classifier parameters updated
    with their own learning rate.
    """

    __slots__ = ("name", "value", "grad", "decay", "binary", "theta")

    def __init__(self, name: str, value, decay: bool = False,
                 binary: bool = False, theta: bool = False):
        self.name = name
        self.value = f32(value)
        self.grad = np.zeros_like(self.value)
        self.decay = decay
        self.binary = binary
        self.theta = theta

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"
