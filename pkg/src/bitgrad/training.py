"""Training loop: optimizers, LR schedules, metrics, and checkpointing.

Each step runs forward (weights binarized by the configured estimator,
activations by sign), backward (weight grads routed through the estimator,
activation grads through clipped straight-through), then updates the latent
weights with lr and the shared classifier parameters with their own
eta_theta. Latent binary weights are clamped to [-1.5, 1.5] after every
step. Weight decay applies to full-precision conv/linear weights only.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import ConfigError, IntegrityError, FormatError, NumericError, VersionError
from .networks import Network, build_network, make_estimator
from .estimators import TanhSoft
from .ops import DTYPE, softmax_cross_entropy
from .params import Parameter

LATENT_CLIP = 1.5

CHECKPOINT_MAGIC = b"BBCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr0: float = 0.1
    schedule: str = "cosine"
    epochs: int = 5
    batch_size: int = 128
    seed: int = 0
    eta_theta: float | None = None  # defaults to lr0
    estimator: dict = field(default_factory=lambda: {"kind": "ste"})

    def validate(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"train.optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError(f"train.schedule must be cosine or linear, got {self.schedule!r}")
        if self.lr0 <= 0:
            raise ConfigError(f"train.lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        return self

    @property
    def theta_lr0(self) -> float:
        return self.lr0 if self.eta_theta is None else self.eta_theta


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine annealing: lr0 * (1 + cos(pi * t / total)) / 2."""
    if total <= 0:
        raise ConfigError("cosine_lr: total steps must be > 0")
    if not 0 <= t <= total:
        raise ConfigError(f"cosine_lr: t={t} outside [0, {total}]")
    return lr0 * (1 + math.cos(math.pi * t / total)) / 2


def linear_lr(t: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise ConfigError("linear_lr: total steps must be > 0")
    return lr0 * (1 - t / total)


def schedule_lr(schedule: str, t: int, total: int, lr0: float) -> float:
    return cosine_lr(t, total, lr0) if schedule == "cosine" else linear_lr(t, total, lr0)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Sgd:
    kind = "sgd"

    def __init__(self, momentum=0.9, weight_decay=1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.slots: dict[str, np.ndarray] = {}

    def step(self, params: list[Parameter], lr: float, theta_lr: float):
        for p in params:
            g = p.grad
            if p.decay and self.weight_decay:
                g = g + DTYPE(self.weight_decay) * p.value
            if self.momentum:
                buf = self.slots.get(p.name)
                if buf is None:
                    buf = np.zeros_like(p.value)
                buf = DTYPE(self.momentum) * buf + g
                self.slots[p.name] = buf
                g = buf
            p.value -= DTYPE(theta_lr if p.theta else lr) * g
            if p.binary:
                np.clip(p.value, -LATENT_CLIP, LATENT_CLIP, out=p.value)

    def state_arrays(self):
        return [(f"opt.m.{k}", v) for k, v in sorted(self.slots.items())]

    def load_state(self, arrays: dict):
        self.slots = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}


class Adam:
    kind = "adam"

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, lr, theta_lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in params:
            g = p.grad
            if p.decay and self.weight_decay:
                g = g + DTYPE(self.weight_decay) * p.value
            m = self.m.get(p.name)
            v = self.v.get(p.name)
            if m is None:
                m = np.zeros_like(p.value)
                v = np.zeros_like(p.value)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + DTYPE(self.eps))
            p.value -= DTYPE(theta_lr if p.theta else lr) * update
            if p.binary:
                np.clip(p.value, -LATENT_CLIP, LATENT_CLIP, out=p.value)

    def state_arrays(self):
        out = [("opt.t", np.array([self.t], dtype=np.int64))]
        out += [(f"opt.adam_m.{k}", v) for k, v in sorted(self.m.items())]
        out += [(f"opt.adam_v.{k}", v) for k, v in sorted(self.v.items())]
        return out

    def load_state(self, arrays):
        if "opt.t" in arrays:
            self.t = int(arrays["opt.t"][0])
        self.m = {k[len("opt.adam_m."):]: v for k, v in arrays.items()
                  if k.startswith("opt.adam_m.")}
        self.v = {k[len("opt.adam_v."):]: v for k, v in arrays.items()
                  if k.startswith("opt.adam_v.")}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return Adam(weight_decay=0.0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class MetricsLog:
    """Per-epoch training record, serializable as CSV."""

    COLUMNS = ("epoch", "train_loss", "test_acc", "lr", "coefficient")

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, epoch, train_loss, test_acc, lr, coefficient=None):
        self.rows.append({"epoch": epoch, "train_loss": train_loss,
                          "test_acc": test_acc, "lr": lr, "coefficient": coefficient})

    def coefficient_trace(self) -> list[float]:
        return [r["coefficient"] for r in self.rows if r["coefficient"] is not None]

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            coeff = "" if r["coefficient"] is None else repr(float(r["coefficient"]))
            lines.append(f"{r['epoch']},{float(r['train_loss'])!r},"
                         f"{float(r['test_acc'])!r},{float(r['lr'])!r},{coeff}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_csv())


def evaluate(net: Network, dataset, batch_size: int = 256) -> float:
    pred = net.predict(dataset.images, batch_size)
    return float((pred == dataset.labels).mean())


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def train(net: Network, train_set, test_set, cfg: TrainConfig,
          out_dir: str | None = None, optimizer=None, start_epoch: int = 0,
          metrics: MetricsLog | None = None, step_callback=None) -> MetricsLog:
    """Train `net` in place; returns the metrics log.

    The seed fully determines initialization (done by the caller via
    build_network) and per-epoch batch order. A checkpoint is written at
    each epoch end when out_dir is given.
    """
    cfg.validate()
    if train_set.images.shape[0] == 0:
        raise ConfigError("training set is empty")
    optimizer = make_optimizer(cfg) if optimizer is None else optimizer
    metrics = MetricsLog() if metrics is None else metrics
    n = train_set.images.shape[0]
    for epoch in range(start_epoch, cfg.epochs):
        lr = schedule_lr(cfg.schedule, epoch, cfg.epochs, cfg.lr0)
        theta_lr = cfg.theta_lr0 * (lr / cfg.lr0)
        net.estimator.epoch_update(epoch, cfg.epochs)
        order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0xDA7A]))
        order = order_rng.permutation(n)
        loss_sum = 0.0
        steps = 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            xb = train_set.images[idx]
            yb = train_set.labels[idx]
            if train_set.augment != "none":
                xb = data_mod.augment(xb, train_set.augment, order_rng)
            net.zero_grad()
            logits = net.forward(xb, train=True)
            loss, dlogits = softmax_cross_entropy(logits, yb)
            if not math.isfinite(loss):
                bad = net.locate_nonfinite(xb, train=True) or "loss"
                raise NumericError(f"non-finite loss at epoch {epoch}, "
                                   f"first offending layer: {bad}")
            net.backward(dlogits)
            optimizer.step(net.params(), lr, theta_lr)
            loss_sum += loss
            steps += 1
            if step_callback is not None:
                step_callback(epoch, steps - 1, loss)
        coeff = None
        if net.classifier is not None:
            coeff = net.classifier.effective_coefficient()
            if not math.isfinite(coeff):
                raise NumericError(f"non-finite effective coefficient at epoch {epoch}")
        acc = evaluate(net, test_set)
        metrics.append(epoch, loss_sum / max(steps, 1), acc, lr, coeff)
        if out_dir is not None:
            checkpoint_save(Path(out_dir) / "checkpoint.bbck", net, optimizer, cfg, epoch + 1)
    return metrics


# ---------------------------------------------------------------------------
# checkpoints: magic BBCK, version, named arrays, CRC-32 trailer
# ---------------------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_arrays(items) -> bytes:
    chunks = []
    for name, arr in items:
        arr = np.ascontiguousarray(arr)
        code = _DTYPE_CODES[arr.dtype]
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _unpack_arrays(buf: bytes, offset: int) -> dict[str, np.ndarray]:
    out = {}
    end = len(buf)
    while offset < end:
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + nlen].decode()
        offset += nlen
        code, ndim = struct.unpack_from("<BB", buf, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if ndim == 0:
            nbytes = dtype.itemsize
        arr = np.frombuffer(buf[offset:offset + nbytes], dtype=dtype).reshape(shape)
        offset += nbytes
        out[name] = arr.copy()
    return out


def _network_arrays(net: Network):
    items = [(p.name, p.value) for p in net.params()]
    for layer in _walk_layers(net.layers):
        if hasattr(layer, "running_mean"):
            items.append((f"{layer.name}.running_mean", layer.running_mean))
            items.append((f"{layer.name}.running_var", layer.running_var))
    return items


def _walk_layers(layers):
    from .layers import BiRealBlock
    for layer in layers:
        if isinstance(layer, BiRealBlock):
            sub = [layer.conv1, layer.bn1, layer.conv2, layer.bn2]
            if layer.downsample:
                sub += layer.downsample
            yield from _walk_layers(sub)
        else:
            yield layer


def checkpoint_save(path, net: Network, optimizer, cfg: TrainConfig, epoch: int):
    meta = {
        "arch": net.arch,
        "in_channels": net.in_channels,
        "num_classes": net.num_classes,
        "epoch": epoch,
        "config": {
            "optimizer": cfg.optimizer, "momentum": cfg.momentum,
            "weight_decay": cfg.weight_decay, "lr0": cfg.lr0,
            "schedule": cfg.schedule, "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "seed": cfg.seed,
            "eta_theta": cfg.eta_theta, "estimator": cfg.estimator,
        },
    }
    est = net.estimator
    if isinstance(est, TanhSoft):
        meta["tanh_state"] = {"k": float(est.k), "t": float(est.t)}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    body = struct.pack("<I", len(meta_bytes)) + meta_bytes
    body += _pack_arrays(_network_arrays(net) + optimizer.state_arrays())
    blob = CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION) + body
    blob += struct.pack("<I", zlib.crc32(blob))
    Path(path).write_bytes(blob)


def checkpoint_load(path):
    """Rebuild (net, optimizer, cfg, epoch) from a checkpoint file."""
    blob = Path(path).read_bytes()
    if len(blob) < 10:
        raise IntegrityError(f"{path}: truncated checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version > CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version} > supported "
                           f"{CHECKPOINT_VERSION}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise IntegrityError(f"{path}: CRC mismatch, file corrupt")
    (meta_len,) = struct.unpack_from("<I", blob, 6)
    meta = json.loads(blob[10:10 + meta_len].decode())
    arrays = _unpack_arrays(blob[:-4], 10 + meta_len)

    cfgd = meta["config"]
    cfg = TrainConfig(optimizer=cfgd["optimizer"], momentum=cfgd["momentum"],
                      weight_decay=cfgd["weight_decay"], lr0=cfgd["lr0"],
                      schedule=cfgd["schedule"], epochs=cfgd["epochs"],
                      batch_size=cfgd["batch_size"], seed=cfgd["seed"],
                      eta_theta=cfgd["eta_theta"], estimator=cfgd["estimator"])
    est_cfg = dict(cfg.estimator)
    kind = est_cfg.pop("kind")
    est_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE57]))
    estimator = make_estimator(kind, est_cfg, rng=est_rng)
    net = build_network(meta["arch"], estimator, meta["in_channels"],
                        meta["num_classes"], seed=cfg.seed)
    for p in net.params():
        if p.name not in arrays:
            raise FormatError(f"{path}: missing parameter {p.name}")
        if arrays[p.name].shape != p.value.shape:
            raise FormatError(f"{path}: shape mismatch for {p.name}")
        p.value[...] = arrays[p.name]
    for layer in _walk_layers(net.layers):
        if hasattr(layer, "running_mean"):
            layer.running_mean = arrays[f"{layer.name}.running_mean"].copy()
            layer.running_var = arrays[f"{layer.name}.running_var"].copy()
    if isinstance(estimator, TanhSoft) and "tanh_state" in meta:
        estimator.set_params(meta["tanh_state"]["k"], meta["tanh_state"]["t"])
    optimizer = make_optimizer(cfg)
    optimizer.load_state(arrays)
    return net, optimizer, cfg, meta["epoch"]
