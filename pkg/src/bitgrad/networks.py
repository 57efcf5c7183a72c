"""Network builders and the sequential container the trainer drives.

Both architectures follow common binary-network practice: the first
convolution and the final classifier stay full precision, every
intermediate convolution is binarized, and one gradient estimator (with one
shared MLP classifier, when applicable) serves the whole network.
"""

from __future__ import annotations

import numpy as np

from .bbc import BbcEstimator, MlpClassifier
from .errors import ConfigError
from .estimators import GradEstimator, PolySoft, RootSoft, Ste, SteUnclipped, TanhSoft
from .layers import (AvgPool, BatchNorm, BinaryConvLayer, BiRealBlock, Flatten,
                     Layer, Linear, MaxPool, PReLU)

ARCHS = ("lenet_b", "resnet20_bireal")

ESTIMATOR_KINDS = ("ste", "ste_unclipped", "tanh", "poly", "root", "bbc")


def make_estimator(kind: str, params: dict | None = None,
                   rng: np.random.Generator | None = None) -> GradEstimator:
    """Build one estimator instance to be shared by every binarized layer."""
    params = dict(params or {})
    if kind == "ste":
        return Ste()
    if kind == "ste_unclipped":
        return SteUnclipped()
    if kind == "tanh":
        return TanhSoft(k=params.get("k", 1.0), t=params.get("t", 1.0),
                        schedule=params.get("schedule", True))
    if kind == "poly":
        return PolySoft(r=params.get("r", 1.0), q=params.get("q", 1.0))
    if kind == "root":
        return RootSoft(a_exp=params.get("a_exp", 0.8))
    if kind == "bbc":
        clf = MlpClassifier(num_layers=int(params.get("layers", 1)),
                            hidden_width=int(params.get("hidden_width", 100)),
                            activation=params.get("activation", "none"),
                            rng=rng)
        return BbcEstimator(clf, train_theta=params.get("train_theta", True))
    raise ConfigError(f"unknown estimator kind {kind!r}; expected one of {ESTIMATOR_KINDS}")


class Network:
    """A sequence of layers plus the shared estimator/classifier handles."""

    def __init__(self, arch: str, layers: list[Layer], estimator: GradEstimator,
                 in_channels: int, num_classes: int):
        self.arch = arch
        self.layers = layers
        self.estimator = estimator
        self.in_channels = in_channels
        self.num_classes = num_classes

    @property
    def classifier(self) -> MlpClassifier | None:
        return self.estimator.classifier if isinstance(self.estimator, BbcEstimator) else None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g: np.ndarray):
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def params(self):
        ps = []
        for layer in self.layers:
            ps += layer.params()
        if self.classifier is not None:
            ps += self.classifier.params()
        return ps

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def binary_layers(self) -> list[BinaryConvLayer]:
        found = []

        def visit(layer):
            if isinstance(layer, BiRealBlock):
                visit(layer.conv1)
                visit(layer.conv2)
                if layer.downsample:
                    for l in layer.downsample:
                        visit(l)
            elif getattr(layer, "binarize_weight", False):
                found.append(layer)

        for layer in self.layers:
            visit(layer)
        return found

    def locate_nonfinite(self, x: np.ndarray, train: bool) -> str | None:
        """Replay a forward pass and name the first layer whose output is non-finite."""
        for layer in self.layers:
            x = layer.forward(x, train)
            if not np.all(np.isfinite(x)):
                return layer.name
        return None

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, images.shape[0], batch_size):
            logits = self.forward(images[i:i + batch_size], train=False)
            out.append(logits.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def build_lenet_b(estimator, in_channels, num_classes, rng) -> list[Layer]:
    # 4 convolutions + 1 linear classifier; convs 2-4 are binary
    c1, c2, c3, c4 = 16, 24, 32, 32
    layers = [
        BinaryConvLayer("conv1", in_channels, c1, 3, 1, 1, rng=rng, needs_input_grad=False),
        BatchNorm("bn1", c1),
        PReLU("act1", c1),
        MaxPool("pool1", 2),
        BinaryConvLayer("conv2", c1, c2, 3, 2, 1, estimator,
                        binarize_input=True, binarize_weight=True, rng=rng),
        BatchNorm("bn2", c2),
        PReLU("act2", c2),
        BinaryConvLayer("conv3", c2, c3, 3, 1, 1, estimator,
                        binarize_input=True, binarize_weight=True, rng=rng),
        BatchNorm("bn3", c3),
        PReLU("act3", c3),
        BinaryConvLayer("conv4", c3, c4, 3, 1, 1, estimator,
                        binarize_input=True, binarize_weight=True, rng=rng),
        BatchNorm("bn4", c4),
        PReLU("act4", c4),
        AvgPool("gap"),
        Flatten(),
        Linear("fc", c4, num_classes, rng=rng),
    ]
    return layers


def build_resnet20_bireal(estimator, in_channels, num_classes, rng) -> list[Layer]:
    layers: list[Layer] = [
        BinaryConvLayer("stem", in_channels, 16, 3, 1, 1, rng=rng, needs_input_grad=False),
        BatchNorm("stem.bn", 16),
        PReLU("stem.act", 16),
    ]
    in_ch = 16
    for stage, width in enumerate((16, 32, 64)):
        for block in range(3):
            stride = 2 if stage > 0 and block == 0 else 1
            layers.append(BiRealBlock(f"s{stage}b{block}", in_ch, width, stride,
                                      estimator, rng))
            in_ch = width
    layers += [AvgPool("gap"), Flatten(), Linear("fc", 64, num_classes, rng=rng)]
    return layers


def build_network(arch: str, estimator: GradEstimator,
                  in_channels: int = 1, num_classes: int = 10,
                  seed: int = 0) -> Network:
    """Construct a network; the seed fully determines initialization."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB17]))
    if arch == "lenet_b":
        layers = build_lenet_b(estimator, in_channels, num_classes, rng)
    elif arch == "resnet20_bireal":
        layers = build_resnet20_bireal(estimator, in_channels, num_classes, rng)
    else:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    return Network(arch, layers, estimator, in_channels, num_classes)
