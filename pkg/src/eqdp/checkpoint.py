"""Checkpoint directory: ``manifest.ini`` plus a length-prefixed float32 blob.

The blob holds every parameter array in registration order, then the EMA
shadow arrays in the same order.  Each array is an unsigned 64-bit
little-endian element count followed by that many little-endian float32s.
"""
from __future__ import annotations

import configparser
import io
import os
import struct

import numpy as np

from .config import Config, parse_config
from .privacy.accountant import AccountantState, account_steps, to_epsilon

MANIFEST = "manifest.ini"
BLOB = "params.bin"
FORMAT_VERSION = "1"


class CheckpointError(ValueError):
    pass


def write_blob(path: str, arrays) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            flat = np.ascontiguousarray(a, dtype="<f4").ravel()
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())


def read_blob(path: str, shapes) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    out, pos = [], 0
    for shape in shapes:
        if pos + 8 > len(data):
            raise CheckpointError("blob ends before all arrays were read")
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        expected = int(np.prod(shape))
        if count != expected:
            raise CheckpointError(f"blob array has {count} entries, manifest expects {expected}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        out.append(arr.astype(np.float32))
        pos += 4 * count
    if pos != len(data):
        raise CheckpointError("trailing bytes after the last array")
    return out


def save_checkpoint(directory: str, config: Config, estimator) -> str:
    os.makedirs(directory, exist_ok=True)
    model = estimator.model_
    named = model.named_parameters()
    cp = configparser.ConfigParser()
    cp["checkpoint"] = {"format": FORMAT_VERSION, "blob": BLOB, "blob_sections": "params,ema"}
    cp["model"] = {
        "group": model.group.name,
        "num_classes": str(model.num_classes),
        "num_parameters": str(sum(p.data.size for _, p in named)),
        "layers": "\n" + "\n".join(model.describe()),
    }
    cp["parameters"] = {f"p{i:04d}": f"{name} {'x'.join(str(s) for s in p.shape) or 'scalar'}"
                        for i, (name, p) in enumerate(named)}
    cp["normalization"] = {"mean": ",".join(repr(float(v)) for v in estimator.norm_mean_),
                           "std": ",".join(repr(float(v)) for v in estimator.norm_std_)}
    eps = estimator.epsilon()
    cp["accountant"] = {"sample_rate": repr(estimator.sample_rate_), "noise_multiplier": repr(estimator.sigma_),
                        "steps": str(estimator.steps_), "delta": repr(estimator.delta),
                        "conversion": estimator.conversion, "epsilon": repr(eps)}
    buf = io.StringIO()
    cp.write(buf)
    text = "# run configuration\n" + "".join("#| " + line + "\n" for line in config.to_ini().splitlines())
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write(text + buf.getvalue())
    write_blob(os.path.join(directory, BLOB), [p.data for _, p in named] + list(estimator.ema_))
    return directory


def read_manifest(directory: str) -> tuple[Config, configparser.ConfigParser]:
    path = os.path.join(directory, MANIFEST)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    cfg_lines = [line[3:] for line in text.splitlines() if line.startswith("#| ")]
    config = parse_config("\n".join(cfg_lines))
    cp = configparser.ConfigParser()
    cp.read_string("\n".join(line for line in text.splitlines() if not line.startswith("#")))
    if cp.get("checkpoint", "format", fallback=None) != FORMAT_VERSION:
        raise CheckpointError("unsupported checkpoint format")
    return config, cp


def accountant_from_manifest(cp: configparser.ConfigParser) -> AccountantState:
    sec = cp["accountant"]
    state = AccountantState(float(sec["sample_rate"]), float(sec["noise_multiplier"]))
    return account_steps(state, int(sec["steps"])) if state.sigma > 0 else state


def manifest_epsilon(cp: configparser.ConfigParser) -> float:
    sec = cp["accountant"]
    if float(sec["noise_multiplier"]) == 0 and int(sec["steps"]) > 0:
        return float("inf")
    return to_epsilon(accountant_from_manifest(cp), float(sec["delta"]), sec["conversion"])[0]


def load_checkpoint(directory: str):
    """Rebuild the fitted estimator stored in ``directory``."""
    from .harness import make_estimator

    config, cp = read_manifest(directory)
    est = make_estimator(config)
    channels = len(cp["normalization"]["mean"].split(","))
    est.dtype_ = np.dtype(np.float64 if config["precision"] == "float64" else np.float32).type
    est.model_ = est.build_model(channels, config["num_classes"])
    est.classes_ = np.arange(config["num_classes"])
    named = est.model_.named_parameters()
    expected = [cp["parameters"][f"p{i:04d}"].split(" ")[0] for i in range(len(cp["parameters"]))]
    if expected != [n for n, _ in named]:
        raise CheckpointError("parameter registration order differs from the manifest")
    shapes = [p.shape for _, p in named]
    arrays = read_blob(os.path.join(directory, BLOB), shapes + shapes)
    est.model_.set_state(arrays[:len(shapes)])
    est.ema_ = [a.astype(est.dtype_) for a in arrays[len(shapes):]]
    est.norm_mean_ = np.array([float(v) for v in cp["normalization"]["mean"].split(",")])
    est.norm_std_ = np.array([float(v) for v in cp["normalization"]["std"].split(",")])
    acc = cp["accountant"]
    est.sample_rate_ = float(acc["sample_rate"])
    est.sigma_ = float(acc["noise_multiplier"])
    est.steps_ = int(acc["steps"])
    est.accountant_ = accountant_from_manifest(cp)
    est.n_features_in_ = channels * int(config["image_size"]) ** 2
    return est, config
