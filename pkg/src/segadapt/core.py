"""Shared data model: 2D images with physical spacing, probability/binary masks,
domain-labeled samples, dataset splits, and seeded randomness.

All value types are immutable after construction and safe to share across
workers. On-disk sample layout (one directory per clinic/split):

    <dir>/<sample_id>_image.npy     float64 H x W
    <dir>/<sample_id>_mask.npy      uint8 H x W           (labeled samples)
    <dir>/<sample_id>_partner.npy   float64 H x W          (paired samples)
    <dir>/<sample_id>_meta.json     spacing, domain_id, partner_domain_id
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SampleError(ValueError):
    """Raised when an image/mask/sample violates its invariants."""


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Image2D:
    """Single-channel 2D image with per-axis physical spacing in mm."""

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    domain_id: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise SampleError(f"expected a 2D array, got shape {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise SampleError(f"image too small: {px.shape} (need at least 8x8)")
        if not np.isfinite(px).all():
            raise SampleError("image contains non-finite pixels")
        sp = (float(self.spacing[0]), float(self.spacing[1]))
        if sp[0] <= 0 or sp[1] <= 0:
            raise SampleError(f"spacing must be positive, got {sp}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "domain_id", int(self.domain_id))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "Image2D":
        """New image with the same spacing/domain metadata."""
        return Image2D(pixels, self.spacing, self.domain_id)


@dataclass(frozen=True)
class ProbMask:
    """Per-pixel foreground probability map; entries in [0, 1]."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise SampleError(f"expected a 2D array, got shape {p.shape}")
        if not (np.isfinite(p).all() and (p >= 0).all() and (p <= 1).all()):
            raise SampleError("probabilities must be finite and in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape


@dataclass(frozen=True)
class BinMask:
    """Binary foreground mask; entries exactly 0 or 1."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise SampleError(f"expected a 2D array, got shape {lab.shape}")
        vals = np.unique(lab)
        if not np.isin(vals, (0, 1)).all():
            raise SampleError(f"mask entries must be 0/1, got values {vals[:8]}")
        lab = lab.astype(np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def foreground_count(self) -> int:
        return int(self.labels.sum())


@dataclass(frozen=True)
class LabeledSample:
    image: Image2D
    mask: BinMask
    sample_id: str = ""

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise SampleError(
                f"mask shape {self.mask.shape} != image shape {self.image.shape}")


@dataclass(frozen=True)
class UnlabeledSample:
    image: Image2D
    partner: Image2D | None = None
    sample_id: str = ""

    def __post_init__(self):
        if self.partner is not None:
            if self.partner.shape != self.image.shape:
                raise SampleError("paired partner must have identical dimensions")
            if self.partner.domain_id == self.image.domain_id:
                raise SampleError("paired partner must carry a distinct domain_id")


@dataclass(frozen=True)
class DatasetSplit:
    """Train/validation/test partition of a sample list."""

    train: tuple
    val: tuple
    test: tuple
    fractions: tuple[float, float, float]

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise SampleError(f"split fractions must sum to 1, got {self.fractions}")

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

class SeededRng:
    """Deterministic random source. Same seed, same stream, on any platform.

    Backed by numpy's PCG64. The root stream is seeded with
    ``SeedSequence(seed)``; child streams derive from ``SeedSequence((seed,
    key))`` so parallel consumers never share state. ``key`` may be an int or
    a string (hashed to an int via its UTF-8 bytes).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, key) -> "SeededRng":
        child = object.__new__(SeededRng)
        child.seed = self.seed
        child.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed, _key_to_int(key)))))
        return child

    # thin delegation for the draws the codebase actually uses
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    if isinstance(key, str):
        return int.from_bytes(key.encode("utf-8"), "big") % (2**63)
    raise TypeError(f"child key must be int or str, got {type(key)}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def binarize(mask, threshold: float) -> BinMask:
    """Threshold a probability map; ties (p == threshold) map to foreground."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    probs = mask.probs if isinstance(mask, ProbMask) else np.asarray(mask, dtype=np.float64)
    if not np.isfinite(probs).all():
        raise ValueError("probability map contains non-finite entries")
    return BinMask((probs >= threshold).astype(np.uint8))


def largest_remainder_sizes(n: int, fractions) -> list[int]:
    """Integer partition sizes for ``n`` items: floor each quota, then hand the
    remaining items to the largest fractional remainders (ties to earlier
    partitions)."""
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def make_splits(samples, fractions, rng: SeededRng) -> DatasetSplit:
    """Shuffle once and cut into train/val/test by largest-remainder sizes."""
    if len(samples) == 0:
        raise ValueError("cannot split an empty sample list")
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr):
        raise ValueError(f"need three nonnegative fractions, got {fractions}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fr}")
    sizes = largest_remainder_sizes(len(samples), fr)
    perm = rng.permutation(len(samples))
    picked = [samples[i] for i in perm]
    train = tuple(picked[: sizes[0]])
    val = tuple(picked[sizes[0]: sizes[0] + sizes[1]])
    test = tuple(picked[sizes[0] + sizes[1]:])
    return DatasetSplit(train=train, val=val, test=test, fractions=fr)


# ---------------------------------------------------------------------------
# sample serialization
# ---------------------------------------------------------------------------

def save_sample(directory, sample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sid = sample.sample_id
    if not sid:
        raise SampleError("cannot save a sample without a sample_id")
    meta = {"spacing": list(sample.image.spacing), "domain_id": sample.image.domain_id}
    np.save(directory / f"{sid}_image.npy", sample.image.pixels)
    if isinstance(sample, LabeledSample):
        np.save(directory / f"{sid}_mask.npy", sample.mask.labels)
    elif isinstance(sample, UnlabeledSample) and sample.partner is not None:
        np.save(directory / f"{sid}_partner.npy", sample.partner.pixels)
        meta["partner_spacing"] = list(sample.partner.spacing)
        meta["partner_domain_id"] = sample.partner.domain_id
    with open(directory / f"{sid}_meta.json", "w") as f:
        json.dump(meta, f, indent=0, sort_keys=True)


def load_sample(directory, sample_id: str):
    """Load one sample; returns LabeledSample when a mask file exists."""
    directory = Path(directory)
    with open(directory / f"{sample_id}_meta.json") as f:
        meta = json.load(f)
    image = Image2D(np.load(directory / f"{sample_id}_image.npy"),
                    tuple(meta["spacing"]), meta["domain_id"])
    mask_path = directory / f"{sample_id}_mask.npy"
    if mask_path.exists():
        return LabeledSample(image, BinMask(np.load(mask_path)), sample_id)
    partner_path = directory / f"{sample_id}_partner.npy"
    partner = None
    if partner_path.exists():
        partner = Image2D(np.load(partner_path), tuple(meta["partner_spacing"]),
                          meta["partner_domain_id"])
    return UnlabeledSample(image, partner, sample_id)


def list_sample_ids(directory) -> list[str]:
    directory = Path(directory)
    return sorted(p.name[: -len("_meta.json")] for p in directory.glob("*_meta.json"))
