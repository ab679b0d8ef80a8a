"""Synthetic shapes corpus, dataset splitting, and bit-exact file I/O.

Images are single-channel grayscale in [0, 1]. Masks are binary {0, 1}.
The on-disk layout for a dataset directory:

    images/%04d.pgm         input images (8-bit PGM, P5)
    masks_clean/%04d.pgm    expert masks, values {0, 255}
    masks_noisy/%04d.pgm    corrupted masks for train ids (optional)
    split.json              {"train": [...], "metaval": [...], "test": [...]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng, STREAM_DATAGEN, STREAM_SHUFFLE

RAW_MAGIC = b"MDF1"


class FileFormatError(ValueError):
    """Malformed file; the message carries the byte offset."""


@dataclass
class Item:
    image: np.ndarray                 # (H, W) float in [0, 1]
    clean_mask: np.ndarray            # (H, W) uint8 in {0, 1}
    noisy_mask: np.ndarray | None = None


@dataclass
class Dataset:
    items: list[Item]
    train_ids: list[int] = field(default_factory=list)
    metaval_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.items[0].image.shape[0]

    @property
    def width(self) -> int:
        return self.items[0].image.shape[1]

    def __len__(self) -> int:
        return len(self.items)


def _draw_shape_mask(h: int, w: int, rng: Rng) -> np.ndarray:
    """One filled ellipse or axis-aligned rectangle, fully inside the frame."""
    mask = np.zeros((h, w), dtype=np.uint8)
    kind = rng.randint(2)
    scale = min(h, w)
    ry = max(2, int(round(rng.uniform(0.10, 0.26) * scale)))
    rx = max(2, int(round(rng.uniform(0.10, 0.26) * scale)))
    cy = rng.uniform(ry + 1, h - ry - 1)
    cx = rng.uniform(rx + 1, w - rx - 1)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    mask[inside] = 1
    return mask


def gen_synthetic(n: int, h: int, w: int, seed: int) -> Dataset:
    """Generate n images of 1-2 filled shapes on a darker background with
    additive Gaussian texture (sigma 0.1, clamped to [0, 1]). Fully
    determined by the seed."""
    if n < 10:
        raise ValueError("need n >= 10")
    rng = Rng(seed).derive(STREAM_DATAGEN)
    items = []
    for _ in range(n):
        item_rng = rng.derive(1)
        n_shapes = 1 + item_rng.randint(2)
        mask = np.zeros((h, w), dtype=np.uint8)
        for _ in range(n_shapes):
            mask |= _draw_shape_mask(h, w, item_rng)
        image = np.where(mask > 0, 0.75, 0.25)
        noise = item_rng.normals(h * w).reshape(h, w)
        image = np.clip(image + 0.1 * noise, 0.0, 1.0)
        items.append(Item(image=image, clean_mask=mask))
    return Dataset(items=items)


def split(ds: Dataset, metaval_frac: float = 0.02, test_frac: float = 0.2,
          seed: int = 0) -> Dataset:
    """Assign disjoint train/metaval/test tags by seeded shuffle. Metaval
    and test items keep clean masks only (noisy masks are cleared)."""
    if not (0.0 < metaval_frac < 1.0 and 0.0 < test_frac < 1.0):
        raise ValueError("fractions must lie in (0, 1)")
    if metaval_frac + test_frac >= 1.0:
        raise ValueError("fractions must sum to < 1")
    n = len(ds.items)
    n_metaval = int(metaval_frac * n)
    n_test = int(test_frac * n)
    if n_metaval == 0:
        raise ValueError(f"metaval split would be empty for n={n}")
    order = list(range(n))
    Rng(seed).derive(STREAM_SHUFFLE).shuffle(order)
    ds.metaval_ids = sorted(order[:n_metaval])
    ds.test_ids = sorted(order[n_metaval:n_metaval + n_test])
    ds.train_ids = sorted(order[n_metaval + n_test:])
    for i in ds.metaval_ids + ds.test_ids:
        ds.items[i].noisy_mask = None
    return ds


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255) and raw float32 I/O. Round trips are bit-exact.


def write_pgm(path, image: np.ndarray) -> None:
    """Write uint8 data as binary PGM. Float arrays in [0, 1] are quantized
    to 8 bits; binary {0, 1} masks should be scaled by the caller."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise FileFormatError(f"{path}: bad PGM magic at byte 0: {blob[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FileFormatError(f"{path}: truncated header at byte {pos}")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FileFormatError(f"{path}: unsupported maxval {maxval} at byte {pos}")
    body = blob[pos:pos + h * w]
    if len(body) != h * w:
        raise FileFormatError(f"{path}: expected {h * w} pixel bytes at byte {pos}, "
                              f"got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def mask_to_pgm_values(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)


def pgm_values_to_mask(values: np.ndarray) -> np.ndarray:
    return (np.asarray(values) >= 128).astype(np.uint8)


def write_raw_f32(path, array: np.ndarray) -> None:
    """Raw tensor file: magic, u32 rank, u32 dims, float32 little-endian data."""
    arr = np.asarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        dims = np.asarray((arr.ndim,) + arr.shape, dtype="<u4")
        fh.write(dims.tobytes())
        fh.write(arr.tobytes())


def read_raw_f32(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RAW_MAGIC:
        raise FileFormatError(f"{path}: bad magic at byte 0: {blob[:4]!r}")
    if len(blob) < 8:
        raise FileFormatError(f"{path}: truncated rank field at byte 4")
    rank = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise FileFormatError(f"{path}: truncated dims at byte 8")
    shape = tuple(int(d) for d in np.frombuffer(blob[8:header_end], dtype="<u4"))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    body = blob[header_end:]
    if len(body) != 4 * count:
        raise FileFormatError(f"{path}: expected {4 * count} data bytes at byte "
                              f"{header_end}, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).copy()


# ---------------------------------------------------------------------------
# Dataset directory round trip


def save_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks_clean"), exist_ok=True)
    has_noisy = any(it.noisy_mask is not None for it in ds.items)
    if has_noisy:
        os.makedirs(os.path.join(out_dir, "masks_noisy"), exist_ok=True)
    for i, item in enumerate(ds.items):
        write_pgm(os.path.join(out_dir, "images", f"{i:04d}.pgm"), item.image)
        write_pgm(os.path.join(out_dir, "masks_clean", f"{i:04d}.pgm"),
                  mask_to_pgm_values(item.clean_mask))
        if item.noisy_mask is not None:
            write_pgm(os.path.join(out_dir, "masks_noisy", f"{i:04d}.pgm"),
                      mask_to_pgm_values(item.noisy_mask))
    with open(os.path.join(out_dir, "split.json"), "w") as fh:
        json.dump({"train": ds.train_ids, "metaval": ds.metaval_ids,
                   "test": ds.test_ids}, fh)


def load_dataset(data_dir) -> Dataset:
    with open(os.path.join(data_dir, "split.json")) as fh:
        tags = json.load(fh)
    all_ids = sorted(tags["train"] + tags["metaval"] + tags["test"])
    items = []
    for i in all_ids:
        image = read_pgm(os.path.join(data_dir, "images", f"{i:04d}.pgm"))
        clean = read_pgm(os.path.join(data_dir, "masks_clean", f"{i:04d}.pgm"))
        noisy_path = os.path.join(data_dir, "masks_noisy", f"{i:04d}.pgm")
        noisy = None
        if os.path.exists(noisy_path):
            noisy = pgm_values_to_mask(read_pgm(noisy_path))
        items.append(Item(image=image.astype(np.float64) / 255.0,
                          clean_mask=pgm_values_to_mask(clean),
                          noisy_mask=noisy))
    if all_ids != list(range(len(all_ids))):
        raise FileFormatError(f"{data_dir}: ids are not contiguous from 0")
    return Dataset(items=items, train_ids=sorted(tags["train"]),
                   metaval_ids=sorted(tags["metaval"]),
                   test_ids=sorted(tags["test"]))
