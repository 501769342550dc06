"""Planted-structure synthetic datasets.

Images are striped two-class compositions. Each image type pairs two
classes (and, for two-class datasets, a mixing share), so every class
appears in a known set of semantic contexts; the per-sample context id is
the hidden ground truth that hierarchy builders are judged against.
Scene names are derived from the image type, label maps are exact, and
class pixel shares are balanced by cycling image types round-robin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import DataError, LabeledImage
from .ingestion import save_image, save_labelmap, write_class_list, write_manifest
from .rng import derive_rng

STRIPE_PERIOD = 16

# Distinct 8-bit colors so classes stay separable after quantization.
_PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (170, 110, 40), (0, 128, 128), (128, 0, 0),
]


@dataclass(frozen=True)
class SyntheticSpec:
    """What to plant: class count, contexts per class, corpus size, noise."""

    classes: int
    contexts: int
    images: int
    size: int = 64
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise DataError("need at least 2 classes")
        if self.contexts < 1:
            raise DataError("contexts must be >= 1")
        if self.classes > 2:
            if self.contexts > self.classes - 1:
                raise DataError(
                    f"{self.contexts} contexts need at least {self.contexts + 1} classes"
                )
            if self.contexts % 2 == 1 and self.classes % 2 == 1:
                raise DataError("odd context counts need an even class count")
        if self.classes > len(_PALETTE):
            raise DataError(f"at most {len(_PALETTE)} classes supported")
        if self.images < 1 or self.size < STRIPE_PERIOD:
            raise DataError(f"need >= 1 image of size >= {STRIPE_PERIOD}")


@dataclass(frozen=True)
class ImageType:
    """A planted scene archetype: a class pair and the first class's share."""

    name: str
    class_a: int
    class_b: int
    share_a: float


def plan_image_types(spec: SyntheticSpec) -> list[ImageType]:
    """The scene archetypes realizing exactly `contexts` contexts per class.

    With two classes the contexts are distinct mixing shares of the single
    pair. With more classes the contexts are distinct partners along a
    cycle: offset o pairs class i with i+o, giving two contexts per offset
    (or one for the diametric offset on an even cycle).
    """
    C, k = spec.classes, spec.contexts
    types: list[ImageType] = []
    if C == 2:
        for j in range(k):
            share = (j + 1) / (k + 1)
            types.append(ImageType(f"scene-0-1-mix{j}", 0, 1, share))
        return types
    offsets = list(range(1, k // 2 + 1))
    if k % 2 == 1:
        offsets.append(C // 2)
    edges: set[tuple[int, int]] = set()
    for o in offsets:
        for i in range(C):
            a, b = sorted((i, (i + o) % C))
            edges.add((a, b))
    for a, b in sorted(edges):
        types.append(ImageType(f"scene-{a}-{b}", a, b, 0.5))
    return types


def context_of(types: list[ImageType], type_index: int, class_id: int) -> int:
    """Hidden context id of class_id's samples in images of this type."""
    mine = [t for t, it in enumerate(types) if class_id in (it.class_a, it.class_b)]
    return mine.index(type_index)


# How strongly a class's rendering drifts toward its partner's color.
# This plants intra-class appearance variation that follows the semantic
# context, which is the situation the hierarchies are meant to exploit.
CONTEXT_TINT = 0.45


def render_image(spec: SyntheticSpec, types: list[ImageType], index: int) -> tuple[LabeledImage, int]:
    """One striped image; its type cycles round-robin so class pixel
    shares are exact across the corpus.

    Each class is drawn tinted toward its partner in this image, so the
    same class looks different in different contexts while the label map
    stays exact.
    """
    type_index = index % len(types)
    it = types[type_index]
    rng = derive_rng(spec.seed, "synth", index)
    phase = int(rng.integers(STRIPE_PERIOD))
    width_a = int(round(it.share_a * STRIPE_PERIOD))
    width_a = min(max(width_a, 1), STRIPE_PERIOD - 1)

    cols = (np.arange(spec.size) + phase) % STRIPE_PERIOD
    is_a = cols < width_a
    col_class = np.where(is_a, it.class_a, it.class_b)
    labels = np.broadcast_to(col_class, (spec.size, spec.size)).astype(np.int32)

    palette = np.array(_PALETTE, dtype=np.float64) / 255.0
    color_a = (1 - CONTEXT_TINT) * palette[it.class_a] + CONTEXT_TINT * palette[it.class_b]
    color_b = (1 - CONTEXT_TINT) * palette[it.class_b] + CONTEXT_TINT * palette[it.class_a]
    col_colors = np.where(is_a[:, None], color_a, color_b)
    pixels = np.broadcast_to(col_colors, (spec.size, spec.size, 3)).copy()
    if spec.noise > 0:
        pixels = pixels + rng.normal(0.0, spec.noise, size=pixels.shape)
        pixels = np.clip(pixels, 0.0, 1.0)
    # Quantize so the PNG round trip is exact.
    pixels = np.rint(pixels * 255) / 255.0

    img = LabeledImage(
        id=f"synth{index:04d}", pixels=pixels, labels=labels, scene_name=it.name
    )
    return img, type_index


def generate_synthetic(spec: SyntheticSpec, out_dir: Path) -> list[LabeledImage]:
    """Write the dataset (manifest, class list, rasters, label maps) plus
    a hidden-truth table mapping (image, class) to its planted context."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    types = plan_image_types(spec)

    images: list[LabeledImage] = []
    manifest_rows: list[tuple[str, str, str, str | None]] = []
    truth_rows: list[tuple[str, int, int]] = []
    for index in range(spec.images):
        img, type_index = render_image(spec, types, index)
        images.append(img)
        save_image(out_dir / "images" / f"{img.id}.png", img.pixels)
        save_labelmap(out_dir / "labels" / f"{img.id}.png", img.labels)
        manifest_rows.append(
            (img.id, f"images/{img.id}.png", f"labels/{img.id}.png", img.scene_name)
        )
        it = types[type_index]
        for class_id in (it.class_a, it.class_b):
            truth_rows.append((img.id, class_id, context_of(types, type_index, class_id)))

    write_manifest(out_dir / "manifest.tsv", manifest_rows)
    write_class_list(out_dir / "classes.txt", [f"class{j}" for j in range(spec.classes)])
    with open(out_dir / "truth.tsv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["image_id", "class_id", "context_id"])
        for row in truth_rows:
            writer.writerow(row)
    return images


def load_truth(out_dir: Path) -> dict[tuple[str, int], int]:
    """Hidden context ids keyed by (image_id, class_id)."""
    truth: dict[tuple[str, int], int] = {}
    with open(Path(out_dir) / "truth.tsv", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        next(reader)
        for image_id, class_id, context_id in reader:
            truth[(image_id, int(class_id))] = int(context_id)
    return truth
