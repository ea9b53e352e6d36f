"""Synthetic compositional shapes benchmark for zero-shot segmentation.

Images are 64x64 RGB float32 in [0, 1]. Each image shows one to three
non-overlapping objects, every object a (shape, color) pair from a 4x4
product: shapes square, disc, triangle, cross by colors red, green, blue,
yellow. Class id = shape_index * 4 + color_index, ids 0..15; the background
is its own always-present class, id 16; pixels on an object's one-pixel
outer contour carry the ignore id 255.

Compositionality is the point: a model that has seen "square green" and
"disc blue" during training has seen every shape and every color of the
held-out pairs, just never together, so transfer is possible through
language alone.

Object bounding boxes sit on the 4-pixel patch grid, but the shapes do not
fill their boxes, so patch-level labels (majority vote per patch) still mix
object and background patches inside a box. Each shape also carries its own
interior brightness texture (flat, diagonal, horizontal, vertical bands) so
shape identity is visible locally, not only through the silhouette, whose
most informative pixels the ignore contour removes.

Datasets are regenerated on demand from (seed, tag, index); the binary dump
format exists so an exact dataset can be pinned to disk and reloaded
byte-identically.
"""

from __future__ import annotations

import struct

import numpy as np

from . import vocab as zv
from .tensor import seeded_rng

N_SHAPES = 4
N_COLORS = 4
N_OBJECT_CLASSES = N_SHAPES * N_COLORS
BACKGROUND_ID = N_OBJECT_CLASSES
IGNORE_ID = 255

# mid-saturation anchors; per-object jitter keeps color a distribution,
# not a lookup key
_COLOR_RGB = np.array([
    [0.85, 0.10, 0.10],   # red
    [0.10, 0.75, 0.20],   # green
    [0.15, 0.25, 0.85],   # blue
    [0.90, 0.85, 0.15],   # yellow
], dtype=np.float32)

_BOX_SIZES = (12, 16, 20, 24)
_PLACE_RETRIES = 40
_TEXTURE_DEPTH = 0.12

MAGIC = b"LDVC-DS1"
_VERSION = 1


def default_unseen_names() -> list[str]:
    """The held-out diagonal: every shape and every color stays seen."""
    return ["square green", "disc blue", "triangle yellow", "cross red"]


def split_class_ids(unseen_names: list[str]) -> tuple[list[int], list[int]]:
    """Partition the 16 object class ids by the held-out name list."""
    names = zv.class_names(include_background=False)
    index = {n: i for i, n in enumerate(names)}
    unseen = []
    for n in unseen_names:
        if n not in index:
            raise ValueError(f"unknown class name: {n!r}")
        if index[n] in unseen:
            raise ValueError(f"duplicate unseen class: {n!r}")
        unseen.append(index[n])
    if len(unseen) == N_OBJECT_CLASSES:
        raise ValueError("at least one class must stay seen")
    seen = [i for i in range(N_OBJECT_CLASSES) if i not in set(unseen)]
    return seen, sorted(unseen)


def _shape_mask(shape_idx: int, s: int) -> np.ndarray:
    y, x = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    if shape_idx == 0:      # square: the full box
        return np.ones((s, s), dtype=bool)
    if shape_idx == 1:      # disc
        return (y - c) ** 2 + (x - c) ** 2 <= (s / 2.0 - 0.5) ** 2
    if shape_idx == 2:      # triangle, apex at the top
        return np.abs(x - c) <= y / 2.0
    if shape_idx == 3:      # cross: two centered bars spanning the box
        t = max(1, round(s / 6))
        return (np.abs(y - c) <= t) | (np.abs(x - c) <= t)
    raise ValueError(f"shape index {shape_idx} out of range")


def _shape_pattern(shape_idx: int, s: int) -> np.ndarray:
    """Brightness texture inside a shape, +-1 bands two pixels wide.

    The silhouette alone leaves every interior patch a flat color patch, so
    shape identity would live only in contour patches, most of which the
    ignore ring swallows. The bands give each shape a local signature
    (square flat, disc diagonal, triangle horizontal, cross vertical); boxes
    sit on the patch grid, so every interior patch sees one full period at
    a fixed phase."""
    y, x = np.mgrid[0:s, 0:s]
    if shape_idx == 0:
        return np.zeros((s, s), dtype=np.float32)
    if shape_idx == 1:
        k = (x + y) // 2
    elif shape_idx == 2:
        k = y // 2
    elif shape_idx == 3:
        k = x // 2
    else:
        raise ValueError(f"shape index {shape_idx} out of range")
    return np.where(k % 2 == 0, 1.0, -1.0).astype(np.float32)


def _inner(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    return (mask & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:])


def render_sample(seed: int, index: int, classes, tag: str = "train", *,
                  image_size: int = 64, patch: int = 4,
                  min_objects: int = 1, max_objects: int = 3,
                  round_robin: bool = False):
    """Deterministically render image ``index`` of the split named ``tag``.

    ``classes`` lists the permitted object class ids. With ``round_robin``
    the first object's class is classes[index % len(classes)], which
    guarantees full class coverage over any len(classes) consecutive
    indices; the rest are sampled uniformly.
    """
    classes = [int(c) for c in classes]
    if not classes:
        raise ValueError("need at least one object class")
    for c in classes:
        if not 0 <= c < N_OBJECT_CLASSES:
            raise ValueError(f"object class id {c} out of range")
    if image_size % patch:
        raise ValueError("image size must be a multiple of the patch size")
    if not 1 <= min_objects <= max_objects:
        raise ValueError("need 1 <= min_objects <= max_objects")

    rng = seeded_rng(seed, f"{tag}-sample-{index}")
    h = w = image_size
    g = image_size // patch

    tint = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
    image = np.full((h, w, 3), 0.5, dtype=np.float32) + tint
    labels = np.full((h, w), BACKGROUND_ID, dtype=np.uint8)
    occupied = np.zeros((g, g), dtype=bool)

    n_objects = int(rng.integers(min_objects, max_objects + 1))
    for k in range(n_objects):
        if round_robin and k == 0:
            cls = classes[index % len(classes)]
        else:
            cls = classes[int(rng.integers(len(classes)))]
        for _ in range(_PLACE_RETRIES):
            s = int(_BOX_SIZES[rng.integers(len(_BOX_SIZES))])
            sp = s // patch
            r0 = int(rng.integers(g - sp + 1))
            c0 = int(rng.integers(g - sp + 1))
            if occupied[r0:r0 + sp, c0:c0 + sp].any():
                continue
            occupied[r0:r0 + sp, c0:c0 + sp] = True
            mask = _shape_mask(cls // N_COLORS, s)
            color = (_COLOR_RGB[cls % N_COLORS]
                     + rng.uniform(-0.05, 0.05, size=3).astype(np.float32))
            fill = color + _TEXTURE_DEPTH * _shape_pattern(cls // N_COLORS, s)[..., None]
            y0, x0 = r0 * patch, c0 * patch
            image[y0:y0 + s, x0:x0 + s][mask] = fill[mask]
            box = labels[y0:y0 + s, x0:x0 + s]
            box[mask] = cls
            box[mask & ~_inner(mask)] = IGNORE_ID
            break

    image += rng.uniform(-0.03, 0.03, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    return image, labels


def patch_labels(labels: np.ndarray, patch: int) -> np.ndarray:
    """Majority label per patch, ignore pixels excluded; an all-ignore patch
    stays ignore. Ties go to the smaller class id."""
    h, w = labels.shape
    if h % patch or w % patch:
        raise ValueError("label map not divisible by the patch size")
    gh, gw = h // patch, w // patch
    tiles = labels.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3)
    tiles = tiles.reshape(gh, gw, patch * patch)
    out = np.empty((gh, gw), dtype=np.uint8)
    for i in range(gh):
        for j in range(gw):
            t = tiles[i, j]
            t = t[t != IGNORE_ID]
            if t.size == 0:
                out[i, j] = IGNORE_ID
            else:
                out[i, j] = np.argmax(np.bincount(t, minlength=BACKGROUND_ID + 1))
    return out


def patch_tokens(image: np.ndarray, patch: int) -> np.ndarray:
    """(h, w, 3) image -> (h/p, w/p, p*p*3) flattened patch grid."""
    h, w, ch = image.shape
    if h % patch or w % patch:
        raise ValueError("image not divisible by the patch size")
    gh, gw = h // patch, w // patch
    x = image.reshape(gh, patch, gw, patch, ch).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh, gw, patch * patch * ch))


def upsample_patch_predictions(pred: np.ndarray, patch: int) -> np.ndarray:
    """Nearest-neighbor expansion of a patch-level prediction to pixels."""
    return np.repeat(np.repeat(pred, patch, axis=0), patch, axis=1)


# ---------------------------------------------------------------------------
# binary dataset files


def write_dataset(path, images: np.ndarray, labels: np.ndarray, patch: int) -> None:
    images = np.ascontiguousarray(images, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError("images must be (count, h, w, 3)")
    if labels.shape != images.shape[:3]:
        raise ValueError("labels must be (count, h, w) matching the images")
    n, h, w, _ = images.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIII", _VERSION, n, h, w, patch))
        for i in range(n):
            f.write(images[i].tobytes())
            f.write(labels[i].tobytes())


def read_dataset(path):
    """Returns (images, labels, patch); rejects foreign or truncated files."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    version, n, h, w, patch = struct.unpack_from("<IIIII", blob, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    rec = h * w * 3 * 4 + h * w
    if len(blob) != 28 + n * rec:
        raise ValueError(f"{path}: truncated or padded dataset file")
    images = np.empty((n, h, w, 3), dtype=np.float32)
    labels = np.empty((n, h, w), dtype=np.uint8)
    off = 28
    for i in range(n):
        images[i] = np.frombuffer(blob, dtype="<f4", count=h * w * 3,
                                  offset=off).reshape(h, w, 3)
        off += h * w * 12
        labels[i] = np.frombuffer(blob, dtype=np.uint8, count=h * w,
                                  offset=off).reshape(h, w)
        off += h * w
    return images, labels, patch
