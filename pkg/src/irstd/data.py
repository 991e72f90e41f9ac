"""Dataset loading, augmentation and the synthetic small-target generator.

On-disk layout: ``images/<id>.pgm``, ``masks/<id>.pgm`` (binary 8-bit
portable graymaps, magic P5) plus ``splits/train.txt`` / ``splits/test.txt``
with one id per line. Real infrared datasets converted to this layout load
the same way as generated ones.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np


class DatasetError(RuntimeError):
    """Missing file, malformed header or image/mask size mismatch."""


@dataclass
class Sample:
    image: np.ndarray  # float32 2-D in [0, 1]
    mask: np.ndarray  # uint8 2-D in {0, 1}
    id: str


# ---------------------------------------------------------------------------
# portable graymap IO


def write_pgm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError(f"write_pgm expects a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    try:
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while pos < len(blob) and blob[pos : pos + 1].isspace():
                pos += 1
            if blob[pos : pos + 1] == b"#":  # comment line
                while pos < len(blob) and blob[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
        if tokens[0] != b"P5":
            raise ValueError(f"bad magic {tokens[0]!r}")
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        if maxval != 255 or w < 1 or h < 1:
            raise ValueError(f"unsupported header w={w} h={h} maxval={maxval}")
        pos += 1  # single whitespace byte after maxval
        data = blob[pos : pos + w * h]
        if len(data) != w * h:
            raise ValueError(f"expected {w * h} pixel bytes, found {len(data)}")
    except (ValueError, IndexError) as e:
        raise DatasetError(f"malformed PGM file {path}: {e}") from e
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# loading


def read_split(root, split):
    path = os.path.join(root, "splits", f"{split}.txt")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.strip() for line in f if line.strip()]
    except OSError as e:
        raise DatasetError(f"cannot read split list {path}: {e}") from e


def load_dataset(root, split="train"):
    """Load all samples named in the split list.

    Images scale to [0, 1]; masks binarize at 128.
    """
    ids = split if isinstance(split, (list, tuple)) else read_split(root, split)
    samples = []
    for sid in ids:
        img = read_pgm(os.path.join(root, "images", f"{sid}.pgm"))
        msk = read_pgm(os.path.join(root, "masks", f"{sid}.pgm"))
        if img.shape != msk.shape:
            raise DatasetError(
                f"sample {sid!r}: image {img.shape} and mask {msk.shape} sizes differ"
            )
        samples.append(
            Sample(
                image=img.astype(np.float32) / 255.0,
                mask=(msk >= 128).astype(np.uint8),
                id=sid,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# augmentation


def _pad_reflect_to(arr, size):
    py = max(size - arr.shape[0], 0)
    px = max(size - arr.shape[1], 0)
    if py == 0 and px == 0:
        return arr
    return np.pad(arr, ((0, py), (0, px)), mode="reflect")


def augment(sample, seed, size=256):
    """Random flips (p=0.5 each) plus a random crop to size x size.

    The identical geometric transform applies to image and mask. Inputs
    smaller than the crop are first padded reflectively. Deterministic for a
    given seed.
    """
    rng = np.random.default_rng(seed)
    img = _pad_reflect_to(sample.image, size)
    msk = _pad_reflect_to(sample.mask, size)
    if rng.random() < 0.5:
        img = img[:, ::-1]
        msk = msk[:, ::-1]
    if rng.random() < 0.5:
        img = img[::-1, :]
        msk = msk[::-1, :]
    oy = int(rng.integers(0, img.shape[0] - size + 1))
    ox = int(rng.integers(0, img.shape[1] - size + 1))
    return Sample(
        image=np.ascontiguousarray(img[oy : oy + size, ox : ox + size]),
        mask=np.ascontiguousarray(msk[oy : oy + size, ox : ox + size]),
        id=sample.id,
    )


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    count: int = 250
    image_size: int = 128
    targets_min: int = 1
    targets_max: int = 3
    sigma_min: float = 0.8
    sigma_max: float = 2.0
    peak_min: float = 0.4
    peak_max: float = 1.0
    clutter_smoothness: int = 16  # coarse cell size of the background field
    clutter_amp: float = 0.3
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self):
        if self.count < 1 or self.image_size < 8:
            raise ValueError("count must be >= 1 and image_size >= 8")
        if not 1 <= self.targets_min <= self.targets_max:
            raise ValueError("need 1 <= targets_min <= targets_max")
        if self.sigma_min <= 0 or self.sigma_min > self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if not 0 < self.peak_min <= self.peak_max <= 1:
            raise ValueError("peaks must lie in (0, 1]")
        if self.clutter_smoothness < 0 or self.clutter_amp < 0 or self.noise_sigma < 0:
            raise ValueError("clutter/noise settings must be >= 0")
        return self


def _smooth_clutter(rng, size, cell, amp, dtype=np.float64):
    if cell <= 0 or amp <= 0:
        return np.zeros((size, size), dtype=dtype)
    coarse_n = max(size // cell, 2) + 1
    coarse = rng.uniform(0.0, amp, size=(coarse_n, coarse_n))
    # bilinear upsample of the coarse grid onto the pixel grid
    pos = np.linspace(0.0, coarse_n - 1.0, size)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, coarse_n - 1)
    f = pos - i0
    rows = coarse[i0][:, i0] * np.outer(1 - f, 1 - f)
    rows += coarse[i0][:, i1] * np.outer(1 - f, f)
    rows += coarse[i1][:, i0] * np.outer(f, 1 - f)
    rows += coarse[i1][:, i1] * np.outer(f, f)
    return rows.astype(dtype)


def synth_sample(cfg: SynthConfig, rng):
    """One synthetic image/mask pair: smooth clutter + Gaussian targets + noise.

    The mask marks pixels where a target's profile exceeds half its peak,
    i.e. the disk of radius sigma*sqrt(2 ln 2) around the centre.
    """
    size = cfg.image_size
    img = _smooth_clutter(rng, size, cfg.clutter_smoothness, cfg.clutter_amp)
    mask = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_targets = int(rng.integers(cfg.targets_min, cfg.targets_max + 1))
    for _ in range(n_targets):
        sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max)
        peak = rng.uniform(cfg.peak_min, cfg.peak_max)
        margin = 3.0 * sigma + 1.0
        cx = rng.uniform(margin, size - 1 - margin)
        cy = rng.uniform(margin, size - 1 - margin)
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        img += peak * np.exp(-d2 / (2.0 * sigma * sigma))
        mask |= d2 < 2.0 * math.log(2.0) * sigma * sigma
    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8), mask.astype(np.uint8)


def synth_generate(cfg: SynthConfig, out_dir):
    """Write a full synthetic dataset with 80/20 train/test split lists."""
    cfg.validate()
    for sub in ("images", "masks", "splits"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    ids = []
    for i in range(cfg.count):
        img, mask = synth_sample(cfg, rng)
        sid = f"{i:05d}"
        write_pgm(os.path.join(out_dir, "images", f"{sid}.pgm"), img)
        write_pgm(os.path.join(out_dir, "masks", f"{sid}.pgm"), mask * 255)
        ids.append(sid)
    n_train = int(round(cfg.count * 0.8))
    splits = {"train": ids[:n_train], "test": ids[n_train:]}
    for name, chunk in splits.items():
        with open(os.path.join(out_dir, "splits", f"{name}.txt"), "w", encoding="utf-8") as f:
            f.writelines(sid + "\n" for sid in chunk)
    return splits["train"], splits["test"]
