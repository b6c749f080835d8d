"""Flat ``key = value`` configuration.

Precedence, lowest first: built-in defaults, config file, ``CROSSREID_SEED``
(for ``seed`` only), ``--set key=value`` / explicit command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

SEED_ENV = "CROSSREID_SEED"


class ConfigKeyError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


class ConfigValueError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    default: str
    kind: str  # int | float | bool | str | ints
    help: str


KEYS: dict[str, Key] = {k.name: k for k in [
    Key("seed", "0", "int", "master seed for parameter init and epoch sampling"),
    Key("precision", "float32", "str", "float32 (training) or float64"),
    Key("data.root", "", "str", "dataset root containing cam_a/, cam_b/ and optional single_shot/"),
    Key("data.resolution", "32", "int", "square input resolution after resizing (299 at full scale)"),
    Key("data.trials", "1", "int", "number of random 50/50 train/test splits (10 at full scale)"),
    Key("data.seed", "0", "int", "seed for the train/test splits"),
    Key("data.max_frames", "0", "int", "cap on frames read per tracklet; 0 reads all"),
    Key("data.max_identities", "0", "int", "keep only the first N identities; 0 keeps all"),
    Key("synth.k", "8", "int", "synthetic identities"),
    Key("synth.frames", "6", "int", "frames per synthetic tracklet"),
    Key("synth.noise", "0.1", "float", "pixel noise standard deviation of synthetic renderings"),
    Key("model.d", "64", "int", "embedding dimension (also LSTM hidden size)"),
    Key("model.channels", "8,16", "ints", "output channels of each conv layer"),
    Key("model.kernels", "3,3", "ints", "kernel size of each conv layer"),
    Key("model.strides", "1,1", "ints", "stride of each conv layer"),
    Key("model.pools", "2,2", "ints", "max-pool window after each conv layer (1 = none)"),
    Key("model.share_cnn", "true", "bool", "image and video branches share one conv stack"),
    Key("model.init", "passthrough", "str", "passthrough or uniform parameter initialisation"),
    Key("train.epochs", "200", "int", "training epochs (500 at full scale)"),
    Key("train.lr", "0.001", "float", "SGD learning rate"),
    Key("train.checkpoint_every", "50", "int", "checkpoint cadence in epochs; 0 writes only the final one"),
    Key("fmr.enabled", "true", "bool", "graft frozen cross-modal branches and run WP -> KD -> WPK"),
    Key("fmr.wp_end", "", "int", "first knockdown epoch (default 40% of train.epochs)"),
    Key("fmr.kd_end", "", "int", "first epoch after knockdown (default 80% of train.epochs)"),
    Key("fmr.fixed_seed", "0", "int", "seed of the frozen surrogate embedders"),
    Key("eval.score", "verification", "str", "verification (q_same) or distance (negative squared distance)"),
]}


def keys_help() -> str:
    width = max(len(k) for k in KEYS)
    lines = ["recognised config keys (key = default: meaning):"]
    for k in KEYS.values():
        default = k.default if k.default != "" else "<unset>"
        lines.append(f"  {k.name.ljust(width)} = {default}: {k.help}")
    return "\n".join(lines)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValueError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigKeyError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


class Config:
    def __init__(self, values: dict[str, str] | None = None):
        self._values = {k: v.default for k, v in KEYS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, overrides: list[str] | None = None,
             env: dict[str, str] | None = None) -> "Config":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise FileNotFoundError(f"config file not found: {p}")
            for key, value in parse_text(p.read_text(), str(p)).items():
                cfg.set(key, value)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            cfg.set("seed", env[SEED_ENV])
        for item in overrides or []:
            if "=" not in item:
                raise ConfigValueError(f"override {item!r} is not of the form key=value")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value.strip())
        return cfg

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigKeyError(f"unknown config key {key!r}")
        value = str(value).strip()
        if value != "":
            self._convert(KEYS[key], value)  # validate eagerly
        self._values[key] = value

    def is_set(self, key: str) -> bool:
        return self._values[key] != ""

    def get(self, key: str):
        if key not in KEYS:
            raise ConfigKeyError(f"unknown config key {key!r}")
        raw = self._values[key]
        if raw == "":
            raise ConfigKeyError(f"missing required config key {key!r}")
        return self._convert(KEYS[key], raw)

    def get_optional(self, key: str):
        return self.get(key) if self.is_set(key) else None

    @staticmethod
    def _convert(key: Key, raw: str):
        try:
            if key.kind == "int":
                return int(raw)
            if key.kind == "float":
                return float(raw)
            if key.kind == "bool":
                lowered = raw.lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            if key.kind == "ints":
                return tuple(int(x) for x in raw.split(",") if x.strip())
            return raw
        except ValueError:
            raise ConfigValueError(f"config key {key.name!r}: cannot parse {raw!r} as {key.kind}") from None

    def as_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self._values.items())

    def items(self):
        return self._values.items()
