"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from scenehier.data_model import UNLABELED, ClassCatalog, LabeledImage, validate_dataset
from scenehier.network import Conv2D, Dense, MaxPool2D, Model, ReLU


def finite_difference(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f at x, element by element."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def uniform_image(image_id: str, h: int, w: int, value: float = 0.5,
                  label: int = 0, scene: str | None = None) -> LabeledImage:
    return LabeledImage(
        id=image_id,
        pixels=np.full((h, w, 3), value),
        labels=np.full((h, w), label, dtype=np.int32),
        scene_name=scene,
    )


def striped_image(image_id: str, h: int, w: int, classes: tuple[int, int],
                  period: int = 8, scene: str | None = None) -> LabeledImage:
    cols = (np.arange(w) // (period // 2)) % 2
    labels = np.where(cols == 0, classes[0], classes[1]).astype(np.int32)
    labels = np.broadcast_to(labels, (h, w)).copy()
    palette = np.array([[0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.9, 0.9, 0.2], [0.2, 0.2, 0.8]])
    pixels = palette[labels % 4]
    return LabeledImage(id=image_id, pixels=pixels, labels=labels, scene_name=scene)


def tiny_dataset(n_classes: int = 2):
    """Four 16x16 images over two classes, catalog counts filled in."""
    images = [
        striped_image("a", 16, 16, (0, 1)),
        striped_image("b", 16, 16, (1, 0)),
        uniform_image("c", 16, 16, 0.3, label=0),
        uniform_image("d", 16, 16, 0.7, label=n_classes - 1),
    ]
    names = tuple(f"c{i}" for i in range(n_classes))
    counts = tuple(100 for _ in range(n_classes))
    return validate_dataset(images, ClassCatalog(names, counts))


def tiny_model(input_size: int = 8, n_out: int = 3, seed: int = 7) -> Model:
    """Small stack covering every layer kind, for fast training tests."""
    rng = np.random.default_rng(seed)
    layers = [
        Conv2D(3, 3, 4, stride=1, rng=rng),
        ReLU(),
        MaxPool2D(2),
        Dense(((input_size - 2) // 2) ** 2 * 4, 8, rng=rng),
        ReLU(),
        Dense(8, n_out, rng=rng),
    ]
    return Model(layers=layers, input_size=input_size)


def planted_blobs_on_sphere(n_blobs: int, per_blob: int, dim: int, spread: float,
                            seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Well-separated unit-norm blobs around orthogonal axes."""
    assert dim >= n_blobs
    rng = np.random.default_rng(seed)
    points, labels = [], []
    for b in range(n_blobs):
        base = np.zeros(dim)
        base[b] = 1.0
        for _ in range(per_blob):
            p = base + spread * rng.normal(size=dim)
            points.append(p / np.linalg.norm(p))
            labels.append(b)
    return np.asarray(points), np.asarray(labels)


def satellite_blobs(n_blobs: int, core: int, satellite: int, offset: float = 0.35):
    """Blobs made of duplicated points: a tight core plus a small satellite
    group, so any split of a blob isolates the satellite."""
    dim = 2 * n_blobs
    points, labels = [], []
    for b in range(n_blobs):
        u = np.zeros(dim)
        u[b] = 1.0
        v = np.zeros(dim)
        v[b] = 1.0
        v[n_blobs + b] = offset
        v = v / np.linalg.norm(v)
        points.extend([u] * core)
        points.extend([v] * satellite)
        labels.extend([b] * (core + satellite))
    return np.asarray(points), np.asarray(labels)


def agreement_vs_planting(assignments: np.ndarray, truth: np.ndarray) -> float:
    """Best cluster-to-context matching rate (greedy over the small k)."""
    ks = np.unique(assignments)
    ts = np.unique(truth)
    best = 0
    from itertools import permutations

    for perm in permutations(ts, len(ks)):
        mapping = dict(zip(ks, perm))
        best = max(best, int(sum(mapping[a] == t for a, t in zip(assignments, truth))))
    return best / len(truth)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
