"""Dataset sources: CIFAR-10 binary batches, a synthetic oriented-shape set, augmentation."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)


class MalformedRecord(ValueError):
    pass


@dataclass
class DatasetSource:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,)
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ValueError("images must be a non-empty (n, C, H, W) array")
        if self.labels.shape != (len(self.images),):
            raise ValueError("one label per image required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None, seed: int = 0) -> "DatasetSource":
        if n is None or n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return DatasetSource(self.images[idx], self.labels[idx], self.num_classes)

    def save(self, path: str):
        np.savez_compressed(path, images=self.images, labels=self.labels, num_classes=self.num_classes)

    @classmethod
    def load(cls, path: str) -> "DatasetSource":
        with np.load(path) as z:
            return cls(z["images"], z["labels"], int(z["num_classes"]))


def load_cifar10_binary(path) -> DatasetSource:
    """Read one or more CIFAR-10 binary batch files (or a directory of them)."""
    if isinstance(path, (list, tuple)):
        parts = [load_cifar10_binary(p) for p in path]
        return DatasetSource(np.concatenate([p.images for p in parts]),
                             np.concatenate([p.labels for p in parts]), 10)
    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.endswith(".bin"))
        if not files:
            raise FileNotFoundError(f"no .bin batches in {path}")
        return load_cifar10_binary([os.path.join(path, f) for f in files])
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise MalformedRecord(f"{path}: {raw.size} bytes is not a multiple of {RECORD_BYTES}")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise MalformedRecord(f"{path}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return DatasetSource(images, labels, 10)


def write_cifar10_binary(path: str, images_u8: np.ndarray, labels: np.ndarray):
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    rec.tofile(path)


# Shapes as polylines in [-1, 1]^2 (x right, y up).  Class identity ignores
# orientation and handedness.
SHAPES = {
    "bar": [[(-0.7, 0.0), (0.7, 0.0)]],
    "L": [[(-0.4, 0.7), (-0.4, -0.6), (0.5, -0.6)]],
    "T": [[(-0.6, 0.6), (0.6, 0.6)], [(0.0, 0.6), (0.0, -0.7)]],
    "plus": [[(-0.65, 0.0), (0.65, 0.0)], [(0.0, -0.65), (0.0, 0.65)]],
    "U": [[(-0.5, 0.6), (-0.5, -0.5), (0.5, -0.5), (0.5, 0.6)]],
    "Z": [[(-0.55, 0.55), (0.55, 0.55), (-0.55, -0.55), (0.55, -0.55)]],
    "square": [[(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5)]],
    "triangle": [[(-0.6, -0.45), (0.6, -0.45), (0.0, 0.6), (-0.6, -0.45)]],
}
SHAPE_NAMES = tuple(SHAPES)


def _segments(name: str) -> np.ndarray:
    segs = []
    for line in SHAPES[name]:
        for a, b in zip(line, line[1:]):
            segs.append((a, b))
    return np.asarray(segs, dtype=float)  # (S, 2, 2)


def render_shape(name: str, size: int, angle: float, reflect: bool, width: float = 0.09,
                 shift=(0.0, 0.0), scale: float = 1.0) -> np.ndarray:
    """Soft rasterization of a shape, ``(size, size)`` with values in [0, 1]."""
    segs = _segments(name).copy()
    if reflect:
        segs[..., 0] *= -1
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    segs = scale * segs @ rot.T + np.asarray(shift)
    # pixel centres in the same frame: column -> x, row -> -y
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    px, py = np.meshgrid(coords, -coords)
    pts = np.stack([px, py], axis=-1)[..., None, :]  # (H, W, 1, 2)
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    t = np.clip(((pts - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0, 1)
    d = np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1).min(-1)
    return np.exp(-0.5 * (d / width) ** 2)


def synthetic_oriented_dataset(n: int, num_classes: int = 8, image_size: int = 16, seed: int = 0,
                               noise: float = 0.1, max_shift: float = 0.3,
                               scale_range=(0.7, 1.0)) -> DatasetSource:
    """Shapes at uniformly random rotation and reflection; the label is the shape."""
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    angles = rng.uniform(0, 2 * np.pi, size=n)
    reflects = rng.random(n) < 0.5
    shifts = rng.uniform(-max_shift, max_shift, size=(n, 2))
    scales = rng.uniform(*scale_range, size=n)
    colors = rng.uniform(0.5, 1.0, size=(n, 3))
    images = np.empty((n, 3, image_size, image_size))
    for i in range(n):
        mask = render_shape(SHAPE_NAMES[labels[i]], image_size, angles[i], bool(reflects[i]),
                            shift=shifts[i], scale=scales[i])
        images[i] = colors[i][:, None, None] * mask[None]
    images += noise * rng.standard_normal(images.shape)
    return DatasetSource(np.clip(images, 0.0, 1.0), labels, num_classes)


def augment(image: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Reflect-pad, random crop back to size, then a horizontal flip with probability 1/2."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = padded[:, dy:dy + h, dx:dx + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)
