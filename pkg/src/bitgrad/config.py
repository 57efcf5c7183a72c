"""Flat `section.key = value` run configuration with typed validation.

Unknown keys are a hard error; flags override file values; every run writes
its fully-resolved config next to its outputs.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

_BOOLS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _bool(s):
    v = _BOOLS.get(str(s).strip().lower())
    if v is None:
        raise ConfigError(f"expected a boolean, got {s!r}")
    return v


# key -> (parser, default, allowed-values-or-None)
KEYS = {
    "model.arch": (str, "lenet_b", ("lenet_b", "resnet20_bireal")),
    "model.num_classes": (int, 10, None),
    "estimator.kind": (str, "ste", ("ste", "ste_unclipped", "tanh", "poly", "root", "bbc")),
    "estimator.k": (float, 1.0, None),
    "estimator.t": (float, 1.0, None),
    "estimator.schedule": (_bool, True, None),
    "estimator.r": (float, 1.0, None),
    "estimator.q": (float, 1.0, None),
    "estimator.a_exp": (float, 0.8, None),
    "bbc.layers": (int, 1, (1, 2)),
    "bbc.hidden_width": (int, 100, None),
    "bbc.activation": (str, "none", ("none", "tanh", "relu")),
    "bbc.lr": (float, -1.0, None),  # < 0 means "use train.lr0"
    "train.optimizer": (str, "sgd", ("sgd", "adam")),
    "train.momentum": (float, 0.9, None),
    "train.weight_decay": (float, 1e-4, None),
    "train.lr0": (float, 0.1, None),
    "train.schedule": (str, "cosine", ("cosine", "linear")),
    "train.epochs": (int, 5, None),
    "train.batch_size": (int, 128, None),
    "train.seed": (int, 0, None),
    "data.set": (str, "mnist", ("mnist", "cifar10")),
    "data.dir": (str, "", None),
    "data.limit_train": (int, 0, None),  # 0 = use the full split
    "data.augment": (str, "auto", ("auto", "none")),
}


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: spec[1] for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parse, _, allowed = KEYS[key]
        try:
            val = parse(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config key {key}: {e}") from e
        if allowed is not None and val not in allowed:
            raise ConfigError(f"config key {key}: {val!r} not in {allowed}")
        self.values[key] = val

    def __getitem__(self, key):
        return self.values[key]

    def estimator_params(self) -> dict:
        kind = self["estimator.kind"]
        if kind == "tanh":
            return {"k": self["estimator.k"], "t": self["estimator.t"],
                    "schedule": self["estimator.schedule"]}
        if kind == "poly":
            return {"r": self["estimator.r"], "q": self["estimator.q"]}
        if kind == "root":
            return {"a_exp": self["estimator.a_exp"]}
        if kind == "bbc":
            return {"layers": self["bbc.layers"], "hidden_width": self["bbc.hidden_width"],
                    "activation": self["bbc.activation"]}
        return {}

    def to_text(self) -> str:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            cfg.set(key.strip(), raw.strip())
        return cfg


def parse_estimator_spec(spec: str) -> tuple[str, dict[str, str]]:
    """Parse 'kind' or 'kind:key=val:key=val' estimator selectors.

    Parameter keys are bare (layers, activation, k, t, ...) and map onto the
    matching estimator.* / bbc.* config keys.
    """
    parts = spec.strip().split(":")
    kind = parts[0]
    if kind not in KEYS["estimator.kind"][2]:
        raise ConfigError(f"unknown estimator {kind!r} in spec {spec!r}")
    params = {}
    for part in parts[1:]:
        if "=" not in part:
            raise ConfigError(f"bad estimator spec segment {part!r} in {spec!r}")
        k, _, v = part.partition("=")
        params[k.strip()] = v.strip()
    return kind, params


def apply_estimator_spec(cfg: RunConfig, spec: str):
    kind, params = parse_estimator_spec(spec)
    cfg.set("estimator.kind", kind)
    for k, v in params.items():
        if k in ("layers", "hidden_width", "activation", "lr"):
            cfg.set(f"bbc.{k}", v)
        else:
            cfg.set(f"estimator.{k}", v)
