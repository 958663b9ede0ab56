"""DP-SGD building blocks: sampling, per-sample gradients, clipping, noise, updates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from .accountant import InvalidRate


@dataclass(frozen=True)
class PrivacyParams:
    clip_norm: float
    noise_multiplier: float
    sample_rate: float
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if not 0 < self.sample_rate <= 1:
            raise InvalidRate("sample_rate must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn independently with probability ``q`` each (may be empty)."""
    if not 0 < q <= 1:
        raise InvalidRate(f"sample rate must lie in (0, 1], got {q}")
    if q == 1:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < q)


def flatten(arrays: Sequence[np.ndarray], lead: int = 0) -> np.ndarray:
    """Concatenate arrays in order, keeping the first ``lead`` axes."""
    if not arrays:
        return np.zeros(0)
    head = arrays[0].shape[:lead]
    return np.concatenate([a.reshape(head + (-1,)) for a in arrays], axis=lead)


def unflatten(vec: np.ndarray, shapes: Sequence[tuple]) -> list[np.ndarray]:
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(vec[i:i + n].reshape(s))
        i += n
    if i != vec.size:
        raise ValueError(f"vector has {vec.size} entries, shapes need {i}")
    return out


def per_sample_flat_grads(model, images: np.ndarray, labels: np.ndarray,
                          micro_batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample flattened gradients ``(B, D)`` and losses ``(B,)``."""
    params = model.parameters()
    d = sum(p.data.size for p in params)
    b = len(images)
    grads = np.zeros((b, d), dtype=model.dtype)
    losses = np.zeros(b, dtype=model.dtype)
    step = b if not micro_batch else micro_batch
    for s in range(0, b, max(1, step)):
        sl = slice(s, min(b, s + step))
        loss = ad.softmax_cross_entropy(model.forward(images[sl]), labels[sl])
        losses[sl] = loss.data
        ad.per_sample_gradients(loss, params)
        grads[sl] = flatten([p.per_sample_grad for p in params], lead=1)
    return grads, losses


def grads_with_aug_multiplicity(model, images: np.ndarray, labels: np.ndarray, k: int,
                                rng: np.random.Generator, augment: Callable | None = None,
                                micro_batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Average each sample's gradient over the original plus ``k - 1`` augmentations.

    Averaging happens before any clipping, so the result is still one
    gradient per sample.  Returns ``(grads (B, D), mean losses (B,))``.
    """
    if k < 1:
        raise ValueError("augmentation multiplicity must be >= 1")
    b = len(images)
    if k == 1:
        return per_sample_flat_grads(model, images, labels, micro_batch)
    views = [images]
    for _ in range(k - 1):
        views.append(np.stack([augment(img, rng) for img in images]) if augment else images)
    stacked = np.stack(views, axis=1).reshape((b * k,) + images.shape[1:])
    g, losses = per_sample_flat_grads(model, stacked, np.repeat(labels, k), micro_batch)
    return g.reshape(b, k, -1).mean(axis=1), losses.reshape(b, k).mean(axis=1)


def clip_factors(per_sample: np.ndarray, clip_norm: float) -> np.ndarray:
    norms = np.sqrt(np.einsum("bd,bd->b", per_sample, per_sample))
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, clip_norm / norms)


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """``g * min(1, C / ||g||)``; the zero vector stays zero."""
    g = np.asarray(g)
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return g * (clip_norm / norm)


def draw_noise(dim: int, noise_multiplier: float, clip_norm: float, rng: np.random.Generator, dtype=np.float64):
    return (rng.standard_normal(dim) * (noise_multiplier * clip_norm)).astype(dtype, copy=False)


def privatize(per_sample: np.ndarray, clip_norm: float, noise_multiplier: float, expected_lot_size: float,
              rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
              check: bool = False) -> np.ndarray:
    """``(sum_b clip(g_b, C) + N(0, sigma^2 C^2 I)) / L``.

    ``noise`` may be supplied pre-drawn so it is independent of the data by
    construction.  An empty lot (shape ``(0, D)``) gives a noise-only update.
    """
    per_sample = np.asarray(per_sample)
    if per_sample.ndim != 2:
        raise ValueError("per-sample gradients must have shape (B, D)")
    if expected_lot_size <= 0:
        raise ValueError("expected lot size must be positive")
    dim = per_sample.shape[1]
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or pre-drawn noise")
        noise = draw_noise(dim, noise_multiplier, clip_norm, rng, per_sample.dtype)
    factors = clip_factors(per_sample, clip_norm)
    clipped = per_sample * factors[:, None]
    if check and len(clipped):
        norms = np.linalg.norm(clipped, axis=1)
        assert np.all(norms <= clip_norm * (1 + 1e-12)), "clipped norm exceeds the bound"
    total = clipped.sum(axis=0) + noise
    return total / expected_lot_size


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """Plain SGD, ``theta - lr * grad`` per array (returns new arrays)."""
    return [p - lr * g for p, g in zip(params, grads)]


def ema_update(shadow: Sequence[np.ndarray], params: Sequence[np.ndarray], decay: float) -> list[np.ndarray]:
    if not 0 <= decay < 1:
        raise ValueError("EMA decay must lie in [0, 1)")
    return [decay * s + (1.0 - decay) * p for s, p in zip(shadow, params)]
