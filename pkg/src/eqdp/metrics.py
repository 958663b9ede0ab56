"""Sparsity and calibration metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_L0_EPS = 1e-5


def l0_eps_fraction(values, eps_threshold: float = DEFAULT_L0_EPS) -> float:
    """Fraction of entries with ``|v| < eps_threshold`` (strict)."""
    if eps_threshold < 0:
        raise ValueError("eps_threshold must be non-negative")
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empty vector")
    return float(np.count_nonzero(np.abs(v) < eps_threshold)) / v.size


def _check_probs(probabilities, labels):
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(labels)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ValueError("expected probabilities (B, K) and labels (B,)")
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise ValueError("labels out of range")
    return p, y.astype(int)


def brier_score(probabilities, labels) -> float:
    """Mean over samples and classes of ``(p_k - y_k)^2``."""
    p, y = _check_probs(probabilities, labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(np.mean((p - onehot) ** 2))


def top1_accuracy(probabilities, labels) -> float:
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(labels)
    if p.ndim != 2 or y.shape != (p.shape[0],) or p.shape[0] == 0:
        raise ValueError("expected probabilities (B, K) and labels (B,)")
    return float(np.mean(np.argmax(p, axis=1) == y))


@dataclass
class SparsityTrace:
    eps_threshold: float = DEFAULT_L0_EPS
    records: list = field(default_factory=list)  # (step, param fraction, grad fraction)

    def record(self, step: int, params, grads) -> tuple[int, float, float]:
        row = (int(step), l0_eps_fraction(params, self.eps_threshold), l0_eps_fraction(grads, self.eps_threshold))
        self.records.append(row)
        return row
