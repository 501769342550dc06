"""Core domain types shared by every stage of the pipeline.

All types are immutable after construction (arrays are marked read-only),
so instances can be shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Label value for pixels without ground truth. Lives outside [0, L).
UNLABELED = -1
# Subclass value for samples that have not been assigned one yet.
UNASSIGNED = -1

INFINITY = math.inf


class DataError(ValueError):
    """A dataset, file, or argument violated a documented contract."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabeledImage:
    """An image raster with a per-pixel integer label map.

    pixels: H x W x 3 intensities in [0, 1].
    labels: H x W integers, UNLABELED or a class id.
    """

    id: str
    pixels: np.ndarray
    labels: np.ndarray
    scene_name: str | None = None

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DataError(f"image {self.id}: pixels must be HxWx3, got {pixels.shape}")
        if labels.shape != pixels.shape[:2]:
            raise DataError(
                f"image {self.id}: label map shape {labels.shape} does not match "
                f"raster shape {pixels.shape[:2]}"
            )
        object.__setattr__(self, "pixels", _freeze(pixels))
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def channel_mean(self) -> np.ndarray:
        """Mean intensity per channel; pads patches and augmented borders."""
        return self.pixels.reshape(-1, 3).mean(axis=0)

    @property
    def labeled_fraction(self) -> float:
        return float(np.count_nonzero(self.labels != UNLABELED) / self.labels.size)


@dataclass(frozen=True)
class ClassCatalog:
    """The original label set: names and per-class superpixel counts."""

    names: tuple[str, ...]
    superpixel_counts: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("class names must be unique")
        if len(self.superpixel_counts) != len(self.names):
            raise DataError(
                f"{len(self.superpixel_counts)} counts for {len(self.names)} classes"
            )
        if any(c < 0 for c in self.superpixel_counts):
            raise DataError("superpixel counts must be non-negative")

    @property
    def n_classes(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class TrainingSample:
    """A patch center inside one image, with its class and subclass labels."""

    image_id: str
    center: tuple[int, int]
    class_label: int
    subclass_label: int = UNASSIGNED

    def with_subclass(self, subclass_label: int) -> "TrainingSample":
        return TrainingSample(self.image_id, self.center, self.class_label, subclass_label)


@dataclass(frozen=True)
class SceneNameProvenance:
    """Subclass created from a (class, scene name) pairing."""

    scene_name: str


@dataclass(frozen=True)
class ClusterProvenance:
    """Subclass created from a label-map histogram cluster center."""

    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "center", _freeze(np.ascontiguousarray(self.center, dtype=np.float64))
        )


@dataclass(frozen=True)
class IdentityProvenance:
    """Subclass that simply inherits its original class label."""


Provenance = SceneNameProvenance | ClusterProvenance | IdentityProvenance


@dataclass(frozen=True)
class LabelHierarchy:
    """Two-level map from subclasses to their original classes."""

    n_classes: int
    parent: tuple[int, ...]
    provenance: tuple[Provenance, ...]
    common_classes: frozenset[int]
    rare_classes: frozenset[int]

    def __post_init__(self):
        L = self.n_classes
        if len(self.provenance) != len(self.parent):
            raise DataError("provenance and parent lengths differ")
        if self.common_classes & self.rare_classes:
            raise DataError("common and rare class sets overlap")
        if (self.common_classes | self.rare_classes) != frozenset(range(L)):
            raise DataError("common and rare sets must partition the class range")
        children: dict[int, list[int]] = {j: [] for j in range(L)}
        for s, j in enumerate(self.parent):
            if not 0 <= j < L:
                raise DataError(f"subclass {s} has parent {j} outside [0, {L})")
            children[j].append(s)
        for j in range(L):
            if not children[j]:
                raise DataError(f"class {j} has no subclass")
        for j in self.rare_classes:
            tags = [self.provenance[s] for s in children[j]]
            if len(tags) != 1 or not isinstance(tags[0], IdentityProvenance):
                raise DataError(f"rare class {j} must have exactly one identity subclass")
        for s, tag in enumerate(self.provenance):
            if isinstance(tag, ClusterProvenance):
                norm = float(np.linalg.norm(tag.center))
                if abs(norm - 1.0) > 1e-9:
                    raise DataError(f"subclass {s} cluster center has norm {norm}")

    @property
    def n_subclasses(self) -> int:
        return len(self.parent)

    def subclasses_of(self, class_id: int) -> tuple[int, ...]:
        return tuple(s for s, j in enumerate(self.parent) if j == class_id)

    @classmethod
    def identity(cls, n_classes: int) -> "LabelHierarchy":
        """One identity subclass per class; subclass ids equal class ids."""
        return cls(
            n_classes=n_classes,
            parent=tuple(range(n_classes)),
            provenance=tuple(IdentityProvenance() for _ in range(n_classes)),
            common_classes=frozenset(),
            rare_classes=frozenset(range(n_classes)),
        )


@dataclass(frozen=True)
class AggregationMatrix:
    """L x n binary matrix summing subclass scores into class scores."""

    W: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        W = np.ascontiguousarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise DataError("aggregation matrix must be 2-D")
        object.__setattr__(self, "W", _freeze(W))

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def n_subclasses(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class Hyperparameters:
    """Training knobs with the published defaults."""

    rho: float = 0.93
    R: float = 129
    alpha: float = 1.0
    beta: float = 0.00025
    patch_size: int = 227
    batch_size: int = 64
    lr0: float = 0.001
    lr_step: int = 20000
    lr_factor: float = 10.0

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise DataError(f"rho must be in (0, 1], got {self.rho}")
        if self.R != INFINITY and (int(self.R) != self.R or int(self.R) % 2 == 0 or self.R < 1):
            raise DataError(f"R must be a positive odd integer or infinity, got {self.R}")
        if self.patch_size < 1 or self.batch_size < 1:
            raise DataError("patch_size and batch_size must be positive")


@dataclass(frozen=True)
class ValidatedDataset:
    """Handle produced by validate_dataset; everything downstream takes one."""

    images: tuple[LabeledImage, ...]
    catalog: ClassCatalog
    labeled_fractions: dict[str, float] = field(compare=False)
    channel_means: np.ndarray = field(compare=False)

    def image(self, image_id: str) -> LabeledImage:
        for img in self.images:
            if img.id == image_id:
                return img
        raise KeyError(image_id)

    @property
    def by_id(self) -> dict[str, LabeledImage]:
        return {img.id: img for img in self.images}


def validate_dataset(images: list[LabeledImage], catalog: ClassCatalog) -> ValidatedDataset:
    """Check every image against the catalog and report labeled fractions.

    Rejects out-of-range labels naming the offending image and pixel. The
    result is independent of the order of the image list apart from the
    stored image order itself.
    """
    if not images:
        raise DataError("dataset contains no images")
    ids = [img.id for img in images]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate image ids in dataset")
    L = catalog.n_classes
    fractions: dict[str, float] = {}
    for img in images:
        bad = (img.labels != UNLABELED) & ((img.labels < 0) | (img.labels >= L))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError(
                f"image {img.id}: label {int(img.labels[r, c])} at pixel "
                f"({int(r)}, {int(c)}) outside [0, {L})"
            )
        if img.pixels.min() < 0.0 or img.pixels.max() > 1.0:
            raise DataError(f"image {img.id}: intensities outside [0, 1]")
        fractions[img.id] = img.labeled_fraction
    means = np.mean([img.channel_mean for img in images], axis=0)
    return ValidatedDataset(
        images=tuple(images),
        catalog=catalog,
        labeled_fractions=fractions,
        channel_means=_freeze(means),
    )
