"""INI-style run configuration with typed keys shared by the file format and CLI flags."""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass

from .groups import GroupSpec


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _widths(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    parts = [p for p in str(text).replace(" ", "").strip("()").split(",") if p]
    return tuple(int(p) for p in parts)


def _opt(conv):
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return conv(text)
    return parse


REQUIRED = object()

# section -> key -> (parser, default)
SCHEMA = {
    "group": {
        "kind": (str, "dihedral"),
        "rotation_order": (int, 4),
        "max_frequency": (int, 1),
    },
    "model": {
        "reference_widths": (_widths, (15, 30, 60)),
        "num_classes": (int, 8),
        "restrict_last_block": (_bool, True),
        "activation": (str, "mish"),
    },
    "optimizer": {
        "learning_rate": (float, 2.0),
        "batch_expected": (int, 256),
        "clip_norm": (float, 1.0),
        "noise_multiplier": (_opt(float), None),
        "num_updates": (int, 100),
        "aug_multiplicity": (int, 1),
        "ema_decay": (float, 0.999),
        "micro_batch": (_opt(int), None),
        "log_every": (int, 10),
    },
    "dataset": {
        "source": (str, "synthetic"),
        "path": (_opt(str), None),
        "test_path": (_opt(str), None),
        "subset_size": (_opt(int), None),
        "seed": (int, 0),
        "num_train": (int, 5000),
        "num_test": (int, 1000),
        "image_size": (int, 16),
    },
    "privacy": {
        "delta": (float, 1e-5),
        "target_epsilon": (_opt(float), 8.0),
        "conversion": (str, "improved"),
    },
    "numerics": {
        "precision": (str, "float64"),
        "padding_mode": (str, "zero"),
        "normalization": (str, "train"),
    },
}

KEY_SECTION = {key: sec for sec, keys in SCHEMA.items() for key in keys}


@dataclass
class Config:
    values: dict  # section -> key -> value

    def __getitem__(self, key: str):
        return self.values[KEY_SECTION[key]][key]

    def get(self, key: str, default=None):
        try:
            return self[key]
        except KeyError:
            return default

    def replace(self, **overrides) -> "Config":
        vals = {s: dict(v) for s, v in self.values.items()}
        for k, v in overrides.items():
            if k not in KEY_SECTION:
                raise ConfigError(f"unknown config key {k!r}")
            vals[KEY_SECTION[k]][k] = _parse_value(k, v) if isinstance(v, str) else v
        if overrides.get("noise_multiplier") is not None and "target_epsilon" not in overrides:
            vals["privacy"]["target_epsilon"] = None
        cfg = Config(vals)
        cfg.validate()
        return cfg

    @property
    def group(self) -> GroupSpec:
        kind = self["kind"]
        try:
            if kind in ("so2", "SO2"):
                return GroupSpec("so2", 1, self["max_frequency"])
            return GroupSpec(kind, self["rotation_order"])
        except Exception as exc:  # noqa: BLE001
            raise ConfigError(f"invalid group: {exc}") from exc

    def validate(self):
        self.group  # noqa: B018 - raises on bad groups
        if self["noise_multiplier"] is not None and self["target_epsilon"] is not None:
            raise ConfigError("noise_multiplier and target_epsilon are mutually exclusive")
        if self["noise_multiplier"] is None and self["target_epsilon"] is None:
            raise ConfigError("one of noise_multiplier and target_epsilon is required")
        if self["noise_multiplier"] is not None and self["noise_multiplier"] < 0:
            raise ConfigError("noise_multiplier must be non-negative")
        if self["target_epsilon"] is not None and not self["target_epsilon"] > 0:
            raise ConfigError("target_epsilon must be positive")
        if len(self["reference_widths"]) != 3 or min(self["reference_widths"]) < 1:
            raise ConfigError("reference_widths must be three positive integers")
        checks = [
            (self["learning_rate"] >= 0, "learning_rate must be non-negative"),
            (self["batch_expected"] >= 1, "batch_expected must be >= 1"),
            (self["clip_norm"] > 0, "clip_norm must be positive"),
            (self["num_updates"] >= 0, "num_updates must be >= 0"),
            (self["aug_multiplicity"] >= 1, "aug_multiplicity must be >= 1"),
            (0 <= self["ema_decay"] < 1, "ema_decay must lie in [0, 1)"),
            (0 < self["delta"] < 1, "delta must lie in (0, 1)"),
            (self["num_classes"] >= 2, "num_classes must be >= 2"),
            (self["precision"] in ("float64", "float32"), "precision must be float64 or float32"),
            (self["padding_mode"] in ("zero", "circular"), "padding_mode must be zero or circular"),
            (self["normalization"] in ("fixed", "train", "none"), "normalization must be fixed, train or none"),
            (self["source"] in ("synthetic", "cifar10", "npz"), "source must be synthetic, cifar10 or npz"),
            (self["conversion"] in ("improved", "classic"), "conversion must be improved or classic"),
            (self["activation"] in ("mish", "relu"), "activation must be mish or relu"),
            (self["image_size"] % 8 == 0 and self["image_size"] >= 16,
             "image_size must be a multiple of 8 and at least 16"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self["source"] == "synthetic" and self["num_classes"] > 8:
            raise ConfigError("the synthetic source has 8 shape classes")
        if self["source"] in ("cifar10", "npz") and not self["path"]:
            raise ConfigError(f"dataset source {self['source']} needs a path")
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec, keys in SCHEMA.items():
            cp[sec] = {k: _format(self.values[sec][k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, text):
    conv, _ = SCHEMA[KEY_SECTION[key]][key]
    try:
        v = conv(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    if isinstance(v, float) and math.isnan(v):
        raise ConfigError(f"{key} is NaN")
    return v


def default_config() -> Config:
    return Config({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})


def parse_config(text: str, overrides: dict | None = None, validate: bool = True) -> Config:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    cfg = default_config()
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            cfg.values[sec][key] = _parse_value(key, raw)
    explicit = {k for sec in cp.sections() for k in cp[sec]}
    for key, raw in (overrides or {}).items():
        if key not in KEY_SECTION:
            raise ConfigError(f"unknown config key {key!r}")
        cfg.values[KEY_SECTION[key]][key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        explicit.add(key)
    # an explicit noise multiplier displaces the default budget
    if cfg["noise_multiplier"] is not None and "target_epsilon" not in explicit:
        cfg.values["privacy"]["target_epsilon"] = None
    return cfg.validate() if validate else cfg


def load_config(path: str | None, overrides: dict | None = None) -> Config:
    text = ""
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def group_overrides(text: str) -> dict:
    """``D4`` / ``C8`` / ``SO2[2]`` / ``e`` shorthand to group keys."""
    try:
        g = GroupSpec.parse(text)
    except Exception as exc:  # noqa: BLE001
        raise ConfigError(f"bad group {text!r}: {exc}") from exc
    if g.kind == "so2":
        return {"kind": "so2", "max_frequency": g.max_frequency}
    return {"kind": g.kind, "rotation_order": g.rotation_order}
