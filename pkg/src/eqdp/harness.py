"""Training, evaluation and audit entry points driven by a Config."""
from __future__ import annotations

import math
import os

import numpy as np

from .checkpoint import load_checkpoint, manifest_epsilon, read_manifest, save_checkpoint
from .config import Config, ConfigError
from .data import DatasetSource, load_cifar10_binary, synthetic_oriented_dataset
from .estimator import EquivariantDPClassifier
from .model import build_eq_resnet9, check_model_equivariance

LOG_NAME = "metrics.log"


def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        if isinstance(v, float):
            v = "inf" if math.isinf(v) else f"{v:.6g}"
        parts.append(f"{k}={v}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    return dict(tok.split("=", 1) for tok in line.split())


def load_datasets(config: Config) -> tuple[DatasetSource, DatasetSource]:
    src = config["source"]
    k = config["num_classes"]
    if src == "synthetic":
        seed = config["seed"]
        train = synthetic_oriented_dataset(config["num_train"], k, config["image_size"], seed=seed)
        test = synthetic_oriented_dataset(config["num_test"], k, config["image_size"], seed=seed + 1)
    elif src == "cifar10":
        path = config["path"]
        try:
            if os.path.isdir(path):
                names = sorted(os.listdir(path))
                train_files = [os.path.join(path, f) for f in names if f.startswith("data_batch") and f.endswith(".bin")]
                test_file = config["test_path"] or os.path.join(path, "test_batch.bin")
                train = load_cifar10_binary(train_files)
                test = load_cifar10_binary(test_file)
            else:
                train = load_cifar10_binary(path)
                test = load_cifar10_binary(config["test_path"]) if config["test_path"] else train
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        try:
            train = DatasetSource.load(config["path"])
            test = DatasetSource.load(config["test_path"]) if config["test_path"] else train
        except OSError as exc:
            raise ConfigError(f"cannot load dataset: {exc}") from exc
    if train.num_classes > k:
        raise ConfigError(f"dataset has {train.num_classes} classes, config allows {k}")
    train = train.subset(config["subset_size"], config["seed"])
    return train, test


def make_estimator(config: Config) -> EquivariantDPClassifier:
    return EquivariantDPClassifier(
        group=config.group, reference_widths=config["reference_widths"], num_classes=config["num_classes"],
        restrict_last_block=config["restrict_last_block"], padding_mode=config["padding_mode"],
        activation=config["activation"], learning_rate=config["learning_rate"],
        batch_expected=config["batch_expected"], clip_norm=config["clip_norm"],
        noise_multiplier=config["noise_multiplier"], target_epsilon=config["target_epsilon"],
        delta=config["delta"], num_updates=config["num_updates"], aug_multiplicity=config["aug_multiplicity"],
        ema_decay=config["ema_decay"], precision=config["precision"], normalization=config["normalization"],
        micro_batch=config["micro_batch"], conversion=config["conversion"], log_every=config["log_every"],
        random_state=config["seed"])


def train(config: Config, out_dir: str, datasets=None) -> tuple[str, list[dict]]:
    """Run DP-SGD per the config; writes a checkpoint and ``metrics.log`` into ``out_dir``."""
    train_set, test_set = datasets if datasets is not None else load_datasets(config)
    if config["batch_expected"] > len(train_set):
        raise ConfigError("batch_expected exceeds the training set size")
    est = make_estimator(config)
    est.fit(train_set.images, train_set.labels)
    log = list(est.log_)
    final = {"step": est.steps_, "epsilon": est.epsilon(), "sigma": est.sigma_, "delta": config["delta"]}
    final.update({f"test_{k}": v for k, v in est.evaluate(test_set.images, test_set.labels).items()})
    log.append(final)
    save_checkpoint(out_dir, config, est)
    with open(os.path.join(out_dir, LOG_NAME), "w") as fh:
        for rec in log:
            fh.write(format_record(rec) + "\n")
    return out_dir, log


def evaluate(checkpoint_dir: str, dataset: DatasetSource | None = None) -> dict:
    """Single deterministic pass with the EMA parameters; no augmentation."""
    est, config = load_checkpoint(checkpoint_dir)
    if dataset is None:
        _, dataset = load_datasets(config)
    return est.evaluate(dataset.images, dataset.labels)


def checkpoint_epsilon(checkpoint_dir: str) -> float:
    _, cp = read_manifest(checkpoint_dir)
    return manifest_epsilon(cp)


def check_equivariance(config: Config, batch: int = 2, seed: int = 0, model=None):
    """Per-layer and end-to-end audit with circular padding, in float64."""
    if model is None:
        model = build_eq_resnet9(config.group, config["reference_widths"], config["num_classes"],
                                 padding_mode="circular", restrict_last_block=config["restrict_last_block"],
                                 activation=config["activation"], seed=seed)
    model.set_padding("circular")
    size = config["image_size"]
    x = np.random.default_rng(seed).uniform(size=(batch, model.input_type.total_channels, size, size))
    return check_model_equivariance(model, x)
