"""Pseudo-images and the small synthetic training set.

Real pixels are out of reach at this scale, so each image is synthesized on
the feature grid: low-amplitude noise keyed by ``image_id`` plus, for every
annotated region, a fixed "colour" vector keyed by the region's label. A
region's colour is painted in proportion to how much of each grid cell it
covers.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..unified_data import Dataset, UnifiedAnnotation, from_instance, from_panoptic
from ..maskops import cell_index, rle_encode


def _seed(*parts: str) -> int:
    h = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def label_signature(label: str, channels: int) -> np.ndarray:
    rng = np.random.default_rng(_seed("label", label.strip().lower()))
    v = rng.normal(size=channels)
    return v / np.linalg.norm(v)


def coverage(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Fraction of each grid cell covered by ``mask``."""
    h, w = mask.shape
    gh, gw = grid
    ri = cell_index(h, gh)
    ci = cell_index(w, gw)
    sums = np.zeros(grid)
    counts = np.zeros(grid)
    np.add.at(sums, (ri[:, None], ci[None, :]), mask.astype(float))
    np.add.at(counts, (ri[:, None], ci[None, :]), 1.0)
    return np.divide(sums, counts, out=np.zeros(grid), where=counts > 0)


def synthesize_image(image_id: str, ann: UnifiedAnnotation | None, grid: tuple[int, int], channels: int, noise: float = 0.1) -> np.ndarray:
    """Deterministic ``channels x H' x W'`` pseudo-image."""
    rng = np.random.default_rng(_seed("image", str(image_id)))
    img = rng.normal(0.0, noise, size=(channels, *grid))
    if ann is not None:
        for r in ann.records:
            img += label_signature(r.label_text, channels)[:, None, None] * coverage(r.binary(), grid)[None]
    return img


def _rect(h, w, r0, r1, c0, c1) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[r0 : r1 + 1, c0 : c1 + 1] = True
    return m


# (image id, [(label, thing_stuff, (row0, row1, col0, col1) or None for "rest of image")])
# things are painted last and cut out of the stuff regions
_LAYOUT = (
    ("syn-0", [("sky", "stuff", (0, 11, 0, 31)), ("grass", "stuff", None), ("dog", "thing", (16, 27, 4, 15))]),
    ("syn-1", [("wall", "stuff", None), ("person", "thing", (4, 27, 4, 11)), ("cat", "thing", (18, 29, 18, 29))]),
    ("syn-2", [("sky", "stuff", (0, 15, 0, 31)), ("road", "stuff", None), ("car", "thing", (10, 21, 12, 27))]),
    ("syn-3", [("grass", "stuff", None), ("dog", "thing", (2, 13, 2, 13)), ("person", "thing", (14, 29, 20, 27))]),
)


def overfit_dataset(size: int = 32, dataset_id: str = "synthetic") -> Dataset:
    """Four panoptic images with three segments each, covering every pixel."""
    anns = []
    for image_id, layout in _LAYOUT:
        things = np.zeros((size, size), dtype=bool)
        for _, tag, rect in layout:
            if tag == "thing":
                things |= _rect(size, size, *rect)
        taken = things.copy()
        masks = {}
        for label, tag, rect in layout:
            if tag == "thing":
                masks[label] = _rect(size, size, *rect)
            elif rect is not None:
                masks[label] = _rect(size, size, *rect) & ~things
                taken |= masks[label]
        for label, tag, rect in layout:
            if tag == "stuff" and rect is None:
                masks[label] = ~taken
        segments = [(label, rle_encode(masks[label]), tag) for label, tag, _ in layout]
        anns.append(from_panoptic((size, size), segments, image_id=image_id, dataset_id=dataset_id))
    return Dataset(dataset_id, anns)


def instance_heavy_dataset(
    n_images: int = 4,
    n_objects: int = 6,
    size: int = 32,
    box: int = 6,
    labels=("dog", "cat", "car", "person"),
    seed: int = 0,
    dataset_id: str = "synthetic-instances",
) -> Dataset:
    """Images holding several small, non-overlapping thing objects each."""
    rng = np.random.default_rng(seed)
    cells = size // box
    anns = []
    for i in range(n_images):
        slots = rng.choice(cells * cells, size=n_objects, replace=False)
        instances = []
        for s in sorted(slots):
            r0, c0 = (s // cells) * box, (s % cells) * box
            label = labels[int(rng.integers(len(labels)))]
            instances.append((label, rle_encode(_rect(size, size, r0, r0 + box - 1, c0, c0 + box - 1)), "thing"))
        anns.append(from_instance((size, size), instances, image_id=f"inst-{i}", dataset_id=dataset_id))
    return Dataset(dataset_id, anns)
