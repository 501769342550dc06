"""Dataset loading, geometric augmentation, center sampling, patch extraction.

On-disk layout: a tab-separated manifest (image_id, image_path,
labelmap_path, scene_name or "-") next to the files it references, plus a
class list file with one class name per line (line index = class id).
Rasters are 8-bit PNG. Label maps are either single-channel PNG with 255
meaning unlabeled, or a plain-text grid of integers with -1 meaning
unlabeled; both round-trip exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data_model import UNLABELED, DataError, LabeledImage
from .rng import derive_rng

# Approximate superpixel area the grid sampler mimics.
GRID_CELL_PIXELS = 300

# PNG label maps store unlabeled pixels as this value.
PNG_UNLABELED = 255


@dataclass(frozen=True)
class AugmentationConfig:
    """Geometric augmentation ranges; defaults are the published ones."""

    seed: int
    n_copies: int = 5
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range_deg: tuple[float, float] = (-8.0, 8.0)
    flip_probability: float = 0.5


@dataclass(frozen=True)
class Patch:
    """A fixed-size crop; padded positions carry the image mean."""

    pixels: np.ndarray
    valid_mask: np.ndarray


def apply_augmentation(
    img: LabeledImage, scale: float, rotation_deg: float, flip: bool
) -> LabeledImage:
    """Flip, scale, and rotate one image together with its label map.

    The raster is resampled bilinearly; the label map with nearest-neighbor
    lookup so no new class values appear. Output pixels whose source lies
    outside the image are unlabeled in the map and mean-valued in the
    raster. The canvas grows or shrinks with the scale factor.
    """
    h_in, w_in = img.height, img.width
    h_out = max(1, round(h_in * scale))
    w_out = max(1, round(w_in * scale))
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    rows, cols = np.meshgrid(np.arange(h_out), np.arange(w_out), indexing="ij")
    y = rows - (h_out - 1) / 2.0
    x = cols - (w_out - 1) / 2.0
    # Inverse map: undo the rotation, then the scale, then recenter.
    src_y = (cos_t * y + sin_t * x) / scale + (h_in - 1) / 2.0
    src_x = (-sin_t * y + cos_t * x) / scale + (w_in - 1) / 2.0
    if flip:
        src_x = (w_in - 1) - src_x

    near_r = np.rint(src_y).astype(np.int64)
    near_c = np.rint(src_x).astype(np.int64)
    inside = (near_r >= 0) & (near_r < h_in) & (near_c >= 0) & (near_c < w_in)

    labels = np.full((h_out, w_out), UNLABELED, dtype=np.int32)
    labels[inside] = img.labels[near_r[inside], near_c[inside]]

    r0 = np.clip(np.floor(src_y).astype(np.int64), 0, h_in - 1)
    c0 = np.clip(np.floor(src_x).astype(np.int64), 0, w_in - 1)
    r1 = np.minimum(r0 + 1, h_in - 1)
    c1 = np.minimum(c0 + 1, w_in - 1)
    fr = np.clip(src_y - r0, 0.0, 1.0)[..., None]
    fc = np.clip(src_x - c0, 0.0, 1.0)[..., None]
    px = img.pixels
    top = px[r0, c0] * (1 - fc) + px[r0, c1] * fc
    bottom = px[r1, c0] * (1 - fc) + px[r1, c1] * fc
    pixels = top * (1 - fr) + bottom * fr
    pixels[~inside] = img.channel_mean

    return LabeledImage(
        id=img.id, pixels=pixels, labels=labels, scene_name=img.scene_name
    )


def augment_image(img: LabeledImage, cfg: AugmentationConfig, copy_index: int) -> LabeledImage:
    """One augmented copy; the draw depends only on (seed, image id, copy)."""
    if not 0 <= copy_index < cfg.n_copies:
        raise DataError(f"copy_index {copy_index} outside [0, {cfg.n_copies})")
    rng = derive_rng(cfg.seed, "augment", img.id, copy_index)
    scale = rng.uniform(*cfg.scale_range)
    rotation = rng.uniform(*cfg.rotation_range_deg)
    flip = bool(rng.random() < cfg.flip_probability)
    out = apply_augmentation(img, scale, rotation, flip)
    return LabeledImage(
        id=f"{img.id}#aug{copy_index}",
        pixels=out.pixels,
        labels=out.labels,
        scene_name=img.scene_name,
    )


def _axis_centers(length: int, stride: int) -> np.ndarray:
    n = length // stride
    if n <= 1:
        return np.array([length // 2])
    offset = (length - n * stride) // 2 + stride // 2
    return offset + stride * np.arange(n)


def sample_centers(img: LabeledImage, target_pixels_per_cell: int) -> list[tuple[int, int]]:
    """Regular grid of labeled patch centers, one per ~target-sized cell."""
    if target_pixels_per_cell < 1:
        raise DataError("target_pixels_per_cell must be >= 1")
    stride = round(math.sqrt(target_pixels_per_cell))
    rows = _axis_centers(img.height, stride)
    cols = _axis_centers(img.width, stride)
    return [
        (int(r), int(c))
        for r in rows
        for c in cols
        if img.labels[r, c] != UNLABELED
    ]


def extract_patch(
    img: LabeledImage, center: tuple[int, int], patch_size: int, mean: np.ndarray
) -> Patch:
    """Crop an S x S window around center, mean-padding beyond the image."""
    r, c = center
    if not (0 <= r < img.height and 0 <= c < img.width):
        raise DataError(f"center {center} outside image {img.id}")
    s = patch_size
    half = s // 2
    pixels = np.empty((s, s, 3), dtype=np.float64)
    pixels[:] = np.asarray(mean, dtype=np.float64)
    valid = np.zeros((s, s), dtype=bool)

    r_lo, c_lo = r - half, c - half
    src_r0, src_c0 = max(r_lo, 0), max(c_lo, 0)
    src_r1, src_c1 = min(r_lo + s, img.height), min(c_lo + s, img.width)
    if src_r0 < src_r1 and src_c0 < src_c1:
        dst_r0, dst_c0 = src_r0 - r_lo, src_c0 - c_lo
        dst_r1, dst_c1 = dst_r0 + (src_r1 - src_r0), dst_c0 + (src_c1 - src_c0)
        pixels[dst_r0:dst_r1, dst_c0:dst_c1] = img.pixels[src_r0:src_r1, src_c0:src_c1]
        valid[dst_r0:dst_r1, dst_c0:dst_c1] = True
    return Patch(pixels=pixels, valid_mask=valid)


# ---------------------------------------------------------------------------
# Disk formats
# ---------------------------------------------------------------------------

def save_image(path: Path, pixels: np.ndarray) -> None:
    data = np.rint(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_labelmap(path: Path, labels: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".png":
        if labels.max(initial=0) >= PNG_UNLABELED:
            raise DataError(
                f"{path}: class ids >= {PNG_UNLABELED} need the text label map format"
            )
        data = labels.astype(np.int64).copy()
        data[data == UNLABELED] = PNG_UNLABELED
        Image.fromarray(data.astype(np.uint8), mode="L").save(path, format="PNG")
    elif path.suffix == ".txt":
        with open(path, "w", encoding="utf-8") as fh:
            for row in labels:
                fh.write(" ".join(str(int(v)) for v in row))
                fh.write("\n")
    else:
        raise DataError(f"{path}: label maps must be .png or .txt")


def load_labelmap(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        with Image.open(path) as im:
            data = np.asarray(im.convert("L"), dtype=np.int32)
        labels = data.copy()
        labels[data == PNG_UNLABELED] = UNLABELED
        return labels
    if path.suffix == ".txt":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rows.append([int(v) for v in line.split()])
        labels = np.asarray(rows, dtype=np.int32)
        if labels.ndim != 2:
            raise DataError(f"{path}: ragged label grid")
        return labels
    raise DataError(f"{path}: label maps must be .png or .txt")


def write_class_list(path: Path, names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in names:
            fh.write(name + "\n")


def read_class_list(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        names = [line.rstrip("\n") for line in fh if line.strip()]
    if not names:
        raise DataError(f"{path}: empty class list")
    return names


def write_manifest(path: Path, rows: list[tuple[str, str, str, str | None]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, image_path, labelmap_path, scene in rows:
            fh.write("\t".join([image_id, image_path, labelmap_path, scene or "-"]) + "\n")


def read_manifest(path: Path) -> list[tuple[str, str, str, str | None]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            image_id, image_path, labelmap_path, scene = parts
            rows.append((image_id, image_path, labelmap_path, None if scene == "-" else scene))
    if not rows:
        raise DataError(f"{path}: empty manifest")
    return rows


def load_images(manifest_path: Path) -> list[LabeledImage]:
    """Load every image named by a manifest; paths resolve next to it."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    images = []
    for image_id, image_rel, labels_rel, scene in read_manifest(manifest_path):
        pixels = load_image(base / image_rel)
        labels = load_labelmap(base / labels_rel)
        images.append(
            LabeledImage(id=image_id, pixels=pixels, labels=labels, scene_name=scene)
        )
    return images
