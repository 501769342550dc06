"""Label hierarchy construction.

Two ways to split original classes into subclasses: pairing a class with
the scene name of the image a sample comes from, and clustering the
label-map histograms of the region around each sample. Frequent classes
get split; infrequent ones keep a single identity subclass so their few
samples are not diluted further.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data_model import (
    INFINITY,
    UNLABELED,
    AggregationMatrix,
    ClassCatalog,
    ClusterProvenance,
    DataError,
    IdentityProvenance,
    LabeledImage,
    LabelHierarchy,
    SceneNameProvenance,
    TrainingSample,
    ValidatedDataset,
)
from .rng import derive_seed

KMEANS_MAX_ITER = 100
CLUSTER_COUNT_CEILING = 15


@dataclass(frozen=True)
class HistogramDescriptor:
    """L2-normalized label histogram of the region around a patch center."""

    h_tilde: np.ndarray
    empty: bool = False


@dataclass(frozen=True)
class ClusterSpec:
    """Clustering outcome for one class: centers and sample assignments."""

    class_id: int
    k: int
    centers: np.ndarray
    assignments: np.ndarray


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    converged: bool
    n_iter: int
    objective_history: tuple[float, ...]


def partition_classes(catalog: ClassCatalog, rho: float) -> tuple[frozenset[int], frozenset[int]]:
    """Split classes into common and rare by cumulative sample mass.

    Classes are sorted by superpixel count descending (ties by ascending
    class index). The smallest prefix whose cumulative count exceeds
    rho * total is common; everything after it is rare.
    """
    if not 0 < rho <= 1:
        raise DataError(f"rho must be in (0, 1], got {rho}")
    counts = catalog.superpixel_counts
    total = sum(counts)
    if total <= 0:
        raise DataError("cannot partition classes: all superpixel counts are zero")
    order = sorted(range(len(counts)), key=lambda j: (-counts[j], j))
    common: set[int] = set()
    cumulative = 0
    for j in order:
        common.add(j)
        cumulative += counts[j]
        if cumulative > rho * total:
            break
    rare = frozenset(range(len(counts))) - common
    return frozenset(common), rare


def compute_label_histogram(
    labels: np.ndarray, center: tuple[int, int], R: float, n_classes: int
) -> HistogramDescriptor:
    """Histogram of class labels in the R x R window around center.

    The window is clipped to the label map and unlabeled pixels are not
    counted; L2 normalization compensates for the lost area. R must be a
    positive odd integer, or infinity to use the whole label map. A window
    containing no labeled pixel yields an empty-flagged descriptor.
    """
    r, c = center
    h, w = labels.shape
    if not (0 <= r < h and 0 <= c < w):
        raise DataError(f"center {center} outside label map of shape {labels.shape}")
    if R == INFINITY:
        window = labels
    else:
        R = int(R)
        if R < 1 or R % 2 == 0:
            raise DataError(f"R must be odd or infinity, got {R}")
        half = R // 2
        window = labels[max(r - half, 0) : r + half + 1, max(c - half, 0) : c + half + 1]
    values = window[window != UNLABELED]
    if values.size == 0:
        return HistogramDescriptor(h_tilde=np.zeros(n_classes), empty=True)
    counts = np.bincount(values, minlength=n_classes).astype(np.float64)
    return HistogramDescriptor(h_tilde=counts / np.linalg.norm(counts), empty=False)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-weighted seeding: each new seed is drawn proportional to
    its squared distance from the nearest seed chosen so far."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum()
        idx = rng.choice(n, p=probs)
        centers[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def kmeans(points: np.ndarray, k: int, max_iter: int = KMEANS_MAX_ITER, seed: int = 0) -> KMeansResult:
    """Lloyd iterations over unit-norm points with unit-norm centers.

    Each update replaces a center by the normalized mean of its members,
    which is the squared-distance minimizer on the unit sphere, so the
    objective never increases. Convergence means the assignments repeated
    between two consecutive iterations. Empty clusters are reseeded at the
    point currently farthest from its own center.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DataError("kmeans needs a non-empty 2-D point array")
    norms = np.linalg.norm(points, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise DataError("kmeans expects unit-norm points")
    n_distinct = np.unique(points, axis=0).shape[0]
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if k > n_distinct:
        raise DataError(f"k={k} exceeds the {n_distinct} distinct points available")

    rng = np.random.default_rng(seed)
    centers = _plusplus_init(points, k, rng)
    prev: np.ndarray | None = None
    history: list[float] = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assignments = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(points.shape[0]), assignments].sum()))
        if prev is not None and np.array_equal(assignments, prev):
            converged = True
            break
        min_d2 = d2[np.arange(points.shape[0]), assignments]
        taken: set[int] = set()
        for j in range(k):
            members = points[assignments == j]
            if members.shape[0] == 0:
                # Reseed deterministically at the worst-fitting point.
                order = np.argsort(-min_d2, kind="stable")
                idx = next(int(i) for i in order if int(i) not in taken)
                taken.add(idx)
                centers[j] = points[idx]
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centers[j] = mean / norm
        prev = assignments
    return KMeansResult(
        centers=centers,
        assignments=assignments,
        converged=converged,
        n_iter=n_iter,
        objective_history=tuple(history),
    )


def choose_cluster_count(points: np.ndarray, n_star: int, seed: int = 0) -> int:
    """Search for the largest balanced cluster count in [2, 15].

    Starting from 2, each candidate count is accepted only if its k-means
    run converges within the iteration budget and every cluster ends up
    with strictly more than n_star members; the first balanced check that
    fails stops the search (non-converged runs are skipped, not fatal).
    Degenerate inputs with fewer than two distinct points get one cluster.
    """
    points = np.asarray(points, dtype=np.float64)
    n_distinct = np.unique(points, axis=0).shape[0]
    if n_distinct < 2:
        return 1
    best = 2
    for i in range(2, CLUSTER_COUNT_CEILING + 1):
        if i > n_distinct:
            break
        result = kmeans(points, i, KMEANS_MAX_ITER, derive_seed(seed, "k", i))
        if not result.converged:
            continue
        sizes = np.bincount(result.assignments, minlength=i)
        if np.all(sizes > n_star):
            best = i
        else:
            break
    return best


def default_n_star(
    samples: Sequence[TrainingSample], common: frozenset[int], rare: frozenset[int]
) -> int:
    """Balance floor for the cluster-count search.

    Normally the sample count of the largest rare class. When no class is
    rare there is no such floor, so fall back to half the smallest common
    class: subclasses then stay at least comparable in size to half a
    whole class, which keeps the search from shattering tight groups.
    """
    per_class = np.zeros(max(common | rare) + 1, dtype=np.int64)
    for s in samples:
        per_class[s.class_label] += 1
    if rare:
        return int(max(per_class[j] for j in rare))
    return math.ceil(min(per_class[j] for j in common) / 2)


def build_scene_name_hierarchy(
    samples: Sequence[TrainingSample],
    dataset: ValidatedDataset,
    common: frozenset[int],
    rare: frozenset[int],
) -> tuple[LabelHierarchy, list[TrainingSample]]:
    """One subclass per realized (common class, scene name) pair.

    Rare classes keep a single identity subclass. Every sample comes back
    with its subclass label filled in. Common-class samples from images
    without a scene name are rejected.
    """
    by_id = dataset.by_id
    realized: dict[int, set[str]] = {j: set() for j in common}
    for s in samples:
        if s.class_label in common:
            scene = by_id[s.image_id].scene_name
            if scene is None:
                raise DataError(
                    f"image {s.image_id} has no scene name but carries samples of "
                    f"common class {s.class_label}"
                )
            realized[s.class_label].add(scene)

    parent: list[int] = []
    provenance: list = []
    pair_to_sid: dict[tuple[int, str], int] = {}
    class_to_identity: dict[int, int] = {}
    for j in range(dataset.catalog.n_classes):
        if j in common:
            for scene in sorted(realized[j]):
                pair_to_sid[(j, scene)] = len(parent)
                parent.append(j)
                provenance.append(SceneNameProvenance(scene))
        else:
            class_to_identity[j] = len(parent)
            parent.append(j)
            provenance.append(IdentityProvenance())

    hierarchy = LabelHierarchy(
        n_classes=dataset.catalog.n_classes,
        parent=tuple(parent),
        provenance=tuple(provenance),
        common_classes=common,
        rare_classes=rare,
    )
    assigned = []
    for s in samples:
        if s.class_label in common:
            sid = pair_to_sid[(s.class_label, by_id[s.image_id].scene_name)]
        else:
            sid = class_to_identity[s.class_label]
        assigned.append(s.with_subclass(sid))
    return hierarchy, assigned


def build_labelmap_hierarchy(
    samples: Sequence[TrainingSample],
    dataset: ValidatedDataset,
    common: frozenset[int],
    rare: frozenset[int],
    R: float,
    n_star: int,
    seed: int = 0,
) -> tuple[LabelHierarchy, list[TrainingSample], dict[int, ClusterSpec]]:
    """Cluster each common class's label-map histograms into subclasses.

    Per common class: descriptors for every sample, the cluster-count
    search against n_star, then a final k-means run whose centers become
    the subclasses. Samples whose window held no labeled pixel are dropped
    from clustering and parked on an identity fallback subclass of their
    class. Rare classes keep a single identity subclass.
    """
    L = dataset.catalog.n_classes
    by_id = dataset.by_id
    by_class: dict[int, list[int]] = {j: [] for j in range(L)}
    for i, s in enumerate(samples):
        by_class[s.class_label].append(i)

    parent: list[int] = []
    provenance: list = []
    sample_sid: dict[int, int] = {}
    specs: dict[int, ClusterSpec] = {}
    n_empty_dropped = 0
    for j in range(L):
        idxs = by_class[j]
        if j in common:
            descriptors = [
                compute_label_histogram(by_id[samples[i].image_id].labels, samples[i].center, R, L)
                for i in idxs
            ]
            usable = [i for i, d in zip(idxs, descriptors) if not d.empty]
            empty = [i for i, d in zip(idxs, descriptors) if d.empty]
            n_empty_dropped += len(empty)
            if not usable:
                raise DataError(
                    f"common class {j} has no sample with a non-empty histogram; "
                    f"the common/rare partition contradicts the data"
                )
            points = np.stack(
                [d.h_tilde for d in descriptors if not d.empty]
            )
            class_seed = derive_seed(seed, "class", j)
            k = choose_cluster_count(points, n_star, class_seed)
            result = kmeans(points, k, KMEANS_MAX_ITER, derive_seed(class_seed, "final"))
            specs[j] = ClusterSpec(
                class_id=j, k=k, centers=result.centers, assignments=result.assignments
            )
            base = len(parent)
            for c in range(k):
                parent.append(j)
                provenance.append(ClusterProvenance(result.centers[c]))
            for pos, i in enumerate(usable):
                sample_sid[i] = base + int(result.assignments[pos])
            if empty:
                fallback = len(parent)
                parent.append(j)
                provenance.append(IdentityProvenance())
                for i in empty:
                    sample_sid[i] = fallback
        else:
            sid = len(parent)
            parent.append(j)
            provenance.append(IdentityProvenance())
            for i in idxs:
                sample_sid[i] = sid

    hierarchy = LabelHierarchy(
        n_classes=L,
        parent=tuple(parent),
        provenance=tuple(provenance),
        common_classes=common,
        rare_classes=rare,
    )
    assigned = [s.with_subclass(sample_sid[i]) for i, s in enumerate(samples)]
    return hierarchy, assigned, specs


def build_aggregation_matrix(hierarchy: LabelHierarchy) -> AggregationMatrix:
    """Binary class-by-subclass matrix: entry (j, s) is 1 iff parent(s) = j."""
    W = np.zeros((hierarchy.n_classes, hierarchy.n_subclasses))
    for s, j in enumerate(hierarchy.parent):
        W[j, s] = 1.0
    return AggregationMatrix(W=W, trainable=False)


def assign_subclasses(
    samples: Sequence[TrainingSample],
    images_by_id: dict[str, LabeledImage],
    hierarchy: LabelHierarchy,
    R: float,
) -> list[TrainingSample]:
    """Give each sample the subclass its class's provenance dictates.

    Scene-name subclasses match on (class, scene); cluster subclasses take
    the nearest center, which reproduces the k-means assignment for the
    samples the hierarchy was built from. Works for samples the builder
    never saw (augmented copies, held-out images).
    """
    by_id = images_by_id
    L = hierarchy.n_classes
    scene_sid: dict[tuple[int, str], int] = {}
    scene_classes: set[int] = set()
    cluster_sids: dict[int, list[int]] = {}
    identity_sid: dict[int, int] = {}
    for s, (j, tag) in enumerate(zip(hierarchy.parent, hierarchy.provenance)):
        if isinstance(tag, SceneNameProvenance):
            scene_sid[(j, tag.scene_name)] = s
            scene_classes.add(j)
        elif isinstance(tag, ClusterProvenance):
            cluster_sids.setdefault(j, []).append(s)
        else:
            identity_sid[j] = s

    out = []
    for sample in samples:
        j = sample.class_label
        if not 0 <= j < L:
            raise DataError(f"sample class {j} outside hierarchy with {L} classes")
        if j in cluster_sids:
            descriptor = compute_label_histogram(
                by_id[sample.image_id].labels, sample.center, R, L
            )
            if descriptor.empty:
                if j not in identity_sid:
                    raise DataError(
                        f"sample at {sample.center} in {sample.image_id} has an empty "
                        f"histogram and class {j} has no fallback subclass"
                    )
                sid = identity_sid[j]
            else:
                sids = cluster_sids[j]
                centers = np.stack([hierarchy.provenance[s].center for s in sids])
                nearest = int(
                    np.argmin(np.sum((centers - descriptor.h_tilde) ** 2, axis=1))
                )
                sid = sids[nearest]
        elif j in scene_classes:
            scene = by_id[sample.image_id].scene_name
            if (j, scene) not in scene_sid:
                raise DataError(
                    f"no subclass for class {j} with scene {scene!r} "
                    f"(image {sample.image_id})"
                )
            sid = scene_sid[(j, scene)]
        elif j in identity_sid:
            sid = identity_sid[j]
        else:
            raise DataError(f"class {j} has no subclass in the hierarchy")
        out.append(sample.with_subclass(sid))
    return out


def infill_unlabeled(
    images: Sequence[LabeledImage],
    predictor: Callable[[LabeledImage], np.ndarray],
    labeled_threshold: float = 0.9,
) -> tuple[list[LabeledImage], list[str]]:
    """Replace unlabeled pixels with predictions on sparsely labeled images.

    Only images whose labeled fraction is below the threshold are touched,
    and on those only the unlabeled pixels change; ground-truth labels
    survive bit for bit. Returns the new image list and the ids filled.
    """
    out: list[LabeledImage] = []
    filled: list[str] = []
    for img in images:
        if img.labeled_fraction >= labeled_threshold:
            out.append(img)
            continue
        predicted = np.asarray(predictor(img), dtype=np.int32)
        if predicted.shape != img.labels.shape:
            raise DataError(
                f"predictor returned shape {predicted.shape} for image {img.id} "
                f"of shape {img.labels.shape}"
            )
        labels = np.where(img.labels == UNLABELED, predicted, img.labels)
        out.append(
            LabeledImage(id=img.id, pixels=img.pixels, labels=labels, scene_name=img.scene_name)
        )
        filled.append(img.id)
    return out, filled


def describe_subclass(hierarchy: LabelHierarchy, catalog: ClassCatalog, sid: int) -> str:
    """Readable subclass name, e.g. 'building+highway' or 'sky/cluster2'."""
    j = hierarchy.parent[sid]
    tag = hierarchy.provenance[sid]
    base = catalog.names[j]
    if isinstance(tag, SceneNameProvenance):
        return f"{base}+{tag.scene_name}"
    if isinstance(tag, ClusterProvenance):
        rank = [s for s in hierarchy.subclasses_of(j) if isinstance(hierarchy.provenance[s], ClusterProvenance)].index(sid)
        return f"{base}/cluster{rank}"
    return base


# ---------------------------------------------------------------------------
# Hierarchy file format (UTF-8 text, round-trips exactly)
# ---------------------------------------------------------------------------

_HEADER = "scenehier-hierarchy v1"


def serialize_hierarchy(h: LabelHierarchy) -> str:
    lines = [
        _HEADER,
        f"n_classes {h.n_classes}",
        f"n_subclasses {h.n_subclasses}",
        "common " + " ".join(str(j) for j in sorted(h.common_classes)),
        "rare " + " ".join(str(j) for j in sorted(h.rare_classes)),
    ]
    for s, (j, tag) in enumerate(zip(h.parent, h.provenance)):
        if isinstance(tag, SceneNameProvenance):
            lines.append(f"subclass {s} parent {j} scene {tag.scene_name}")
        elif isinstance(tag, ClusterProvenance):
            vec = " ".join(repr(float(v)) for v in tag.center)
            lines.append(f"subclass {s} parent {j} cluster {vec}")
        else:
            lines.append(f"subclass {s} parent {j} identity")
    return "\n".join(lines) + "\n"


def deserialize_hierarchy(text: str) -> LabelHierarchy:
    lines = [ln for ln in text.split("\n") if ln]
    if not lines or lines[0] != _HEADER:
        raise DataError("not a hierarchy file (bad header)")
    fields = dict(ln.split(" ", 1) for ln in lines[1:3])
    n_classes = int(fields["n_classes"])
    n_subclasses = int(fields["n_subclasses"])
    common = frozenset(int(v) for v in lines[3].split()[1:])
    rare = frozenset(int(v) for v in lines[4].split()[1:])
    parent: list[int] = []
    provenance: list = []
    for ln in lines[5:]:
        parts = ln.split(" ", 5)
        if parts[0] != "subclass" or parts[2] != "parent":
            raise DataError(f"malformed subclass line: {ln!r}")
        if int(parts[1]) != len(parent):
            raise DataError(f"subclass ids out of order at line: {ln!r}")
        parent.append(int(parts[3]))
        kind = parts[4]
        if kind == "scene":
            provenance.append(SceneNameProvenance(parts[5]))
        elif kind == "cluster":
            provenance.append(
                ClusterProvenance(np.array([float(v) for v in parts[5].split()]))
            )
        elif kind == "identity":
            provenance.append(IdentityProvenance())
        else:
            raise DataError(f"unknown provenance {kind!r}")
    if len(parent) != n_subclasses:
        raise DataError(f"expected {n_subclasses} subclasses, found {len(parent)}")
    return LabelHierarchy(
        n_classes=n_classes,
        parent=tuple(parent),
        provenance=tuple(provenance),
        common_classes=common,
        rare_classes=rare,
    )


def save_hierarchy(path: Path, h: LabelHierarchy) -> None:
    Path(path).write_text(serialize_hierarchy(h), encoding="utf-8")


def load_hierarchy(path: Path) -> LabelHierarchy:
    return deserialize_hierarchy(Path(path).read_text(encoding="utf-8"))


def hierarchy_digest(h: LabelHierarchy) -> str:
    """Content hash binding checkpoints to the hierarchy they trained on."""
    return hashlib.sha256(serialize_hierarchy(h).encode("utf-8")).hexdigest()[:16]
