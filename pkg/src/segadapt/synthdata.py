"""Deterministic multi-clinic phantom generator with controllable
acquisition-level domain shift.

Each subject is an ellipse "brain" with smooth internal texture and 1-8
bright blob lesions. The canonical (shift-free) rendering puts background
tissue at mean exactly 0.5 and lesion pixels at exactly 0.5 * contrast, so
contrast is a testable analytic property. A clinic is a DomainSpec applying,
in order: resolution blur, multiplicative bias field, gamma curve, additive
noise. Lesion geometry (and therefore ground truth) never depends on the
clinic: the shift is acquisition-level, not disease-level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    BinMask,
    DatasetSplit,
    Image2D,
    LabeledSample,
    SeededRng,
    list_sample_ids,
    load_sample,
    make_splits,
    save_sample,
)
from .augment import BiasFieldParams

LESION_FRACTION_BOUNDS = (1e-3, 0.1)
LESION_LOAD_RANGE = (0.04, 0.09)


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """Acquisition profile of one clinic."""

    name: str
    gamma: float = 1.0
    noise_sigma: float = 0.0
    blur_width: float = 0.0
    bias_strength: float = 0.0
    spacing: tuple[float, float] = (1.0, 1.0)
    lesion_contrast: float = 1.7

    def __post_init__(self):
        if self.gamma <= 0:
            raise GenerationError(f"gamma must be positive, got {self.gamma}")
        if self.noise_sigma < 0 or self.blur_width < 0 or self.bias_strength < 0:
            raise GenerationError("noise/blur/bias strengths must be nonnegative")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise GenerationError(f"spacing must be positive, got {self.spacing}")
        if self.lesion_contrast <= 1.0:
            raise GenerationError("lesion contrast multiplier must exceed 1")


@dataclass(frozen=True)
class LesionBlob:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float

    def raster(self, size: int) -> np.ndarray:
        r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        dr, dc = r - self.center[0], c - self.center[1]
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = (dr * ca + dc * sa) / self.axes[0]
        v = (-dr * sa + dc * ca) / self.axes[1]
        return u * u + v * v <= 1.0


@dataclass(frozen=True)
class SubjectPhantom:
    size: int
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    lesions: tuple
    seed: int

    def __post_init__(self):
        anatomy = self.anatomy_mask()
        lesion = self.lesion_mask()
        if (lesion & ~anatomy).any():
            raise GenerationError("lesions must lie inside the anatomy")
        frac = lesion.sum() / anatomy.sum()
        lo, hi = LESION_FRACTION_BOUNDS
        if not lo <= frac <= hi:
            raise GenerationError(f"lesion fraction {frac:.4f} outside [{lo}, {hi}]")

    def anatomy_mask(self) -> np.ndarray:
        r, c = np.meshgrid(np.arange(self.size), np.arange(self.size), indexing="ij")
        u = (r - self.center[0]) / self.semi_axes[0]
        v = (c - self.center[1]) / self.semi_axes[1]
        return u * u + v * v <= 1.0

    def lesion_mask(self) -> np.ndarray:
        out = np.zeros((self.size, self.size), dtype=bool)
        for blob in self.lesions:
            out |= blob.raster(self.size)
        return out

    def lesion_fraction(self) -> float:
        return float(self.lesion_mask().sum() / self.anatomy_mask().sum())


def make_subject(seed: int, size: int = 64) -> SubjectPhantom:
    """Sample one phantom. The lesion load is drawn as a target fraction of
    the anatomy area and divided over 1-4 blobs, which keeps the fraction
    distribution tight enough to compare clinics fairly and the individual
    blobs large enough to survive acquisition blur."""
    rng = SeededRng(seed)
    geom = rng.child("geometry")
    center = (size / 2 + float(geom.uniform(-2, 2)), size / 2 + float(geom.uniform(-2, 2)))
    semi_axes = (float(geom.uniform(0.36, 0.40)) * size, float(geom.uniform(0.36, 0.40)) * size)
    anatomy_area = math.pi * semi_axes[0] * semi_axes[1]

    for attempt in range(50):
        les = rng.child(f"lesions:{attempt}")
        target_frac = float(les.uniform(*LESION_LOAD_RANGE))
        n = int(les.integers(1, 5))
        weights = les.uniform(0.5, 1.5, size=n)
        weights = weights / weights.sum()
        blobs = []
        for k in range(n):
            radius = max(1.2, math.sqrt(target_frac * anatomy_area * weights[k] / math.pi))
            stretch = float(les.uniform(0.85, 1.18))
            axes = (radius * stretch, radius / stretch)
            rmax = max(axes)
            # draw centers from the ellipse shrunk by the blob radius so the
            # whole blob stays inside the anatomy
            ar = semi_axes[0] - rmax - 1.0
            ac = semi_axes[1] - rmax - 1.0
            if ar <= 0 or ac <= 0:
                blobs = []
                break
            t = float(les.uniform(0, 2 * math.pi))
            rho = math.sqrt(float(les.uniform(0, 1)))
            cand = (center[0] + ar * rho * math.cos(t),
                    center[1] + ac * rho * math.sin(t))
            blobs.append(LesionBlob(cand, axes, float(les.uniform(0, math.pi))))
        if not blobs:
            continue
        try:
            return SubjectPhantom(size, center, semi_axes, tuple(blobs), seed)
        except GenerationError:
            continue
    raise GenerationError(f"could not generate a valid phantom for seed {seed}")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _canonical(subject: SubjectPhantom, contrast: float) -> tuple[np.ndarray, np.ndarray]:
    anatomy = subject.anatomy_mask()
    lesion = subject.lesion_mask()
    background = anatomy & ~lesion
    tex_rng = SeededRng(subject.seed).child("texture")
    texture = ndimage.gaussian_filter(tex_rng.normal(size=(subject.size, subject.size)), 3.0)
    texture = texture - texture[background].mean()
    texture = texture * (0.06 / max(texture[background].std(), 1e-12))
    texture -= texture[background].mean()  # exact zero mean over tissue
    img = np.zeros((subject.size, subject.size))
    img[anatomy] = 0.5 + texture[anatomy]
    img[lesion] = 0.5 * contrast
    return img, lesion.astype(np.uint8)


def render(subject: SubjectPhantom, spec: DomainSpec, domain_id: int = 0,
           sample_id: str = "") -> LabeledSample:
    """Acquisition-transformed rendering; mask is the exact lesion raster."""
    img, mask = _canonical(subject, spec.lesion_contrast)
    if spec.blur_width > 0:
        img = ndimage.gaussian_filter(img, spec.blur_width)
    if spec.bias_strength > 0:
        brng = SeededRng(subject.seed).child(f"bias:{spec.name}")
        coeffs = brng.uniform(-spec.bias_strength, spec.bias_strength, size=10)
        coeffs[0] = 0.0  # unit gain at the center: inhomogeneity, not a global scale
        img = img * BiasFieldParams(3, tuple(coeffs)).field(img.shape)
    if spec.gamma != 1.0:
        img = np.power(np.clip(img, 0.0, None), spec.gamma)
    if spec.noise_sigma > 0:
        nrng = SeededRng(subject.seed).child(f"noise:{spec.name}")
        img = img + nrng.normal(0.0, spec.noise_sigma, size=img.shape)
    return LabeledSample(Image2D(img, spec.spacing, domain_id), BinMask(mask), sample_id)


def render_paired(subject: SubjectPhantom, spec_a: DomainSpec, spec_b: DomainSpec,
                  domain_ids: tuple[int, int] = (0, 1),
                  sample_id: str = "") -> tuple[LabeledSample, LabeledSample]:
    """Same anatomy acquired under two profiles: pixel-to-pixel corresponding
    images, bitwise-identical masks."""
    if spec_a == spec_b:
        raise GenerationError("paired rendering needs two distinct specs")
    a = render(subject, spec_a, domain_ids[0], sample_id)
    b = render(subject, spec_b, domain_ids[1], sample_id)
    return a, b


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def clinic_presets() -> dict[str, DomainSpec]:
    """Graded shifts: A is the source profile; B and C shift mainly along
    gamma and bias-field inhomogeneity (directions the training-time
    augmentation family spans, so consistency training can bridge them);
    "extreme" shifts along blur and noise, which no augmentation operator
    simulates, so feature alignment is the only available remedy."""
    return {
        "A": DomainSpec("A", gamma=1.0, noise_sigma=0.03, blur_width=0.5,
                        bias_strength=0.10, spacing=(1.0, 1.0), lesion_contrast=2.3),
        "B": DomainSpec("B", gamma=1.25, noise_sigma=0.04, blur_width=0.6,
                        bias_strength=0.45, spacing=(1.2, 1.2), lesion_contrast=2.1),
        "C": DomainSpec("C", gamma=0.70, noise_sigma=0.05, blur_width=0.8,
                        bias_strength=0.55, spacing=(0.8, 0.8), lesion_contrast=2.0),
        "extreme": DomainSpec("extreme", gamma=2.1, noise_sigma=0.11, blur_width=1.9,
                              bias_strength=0.55, spacing=(1.4, 1.4), lesion_contrast=1.8),
    }


# ---------------------------------------------------------------------------
# benchmark assembly
# ---------------------------------------------------------------------------

SOURCE_FRACTIONS = (0.5, 0.25, 0.25)
TARGET_FRACTIONS = (0.5, 0.0, 0.5)


@dataclass(frozen=True)
class ClinicData:
    spec: DomainSpec
    domain_id: int
    split: DatasetSplit
    subject_seeds: tuple


@dataclass(frozen=True)
class Benchmark:
    clinics: dict
    seed: int
    image_size: int

    def manifest(self) -> dict:
        out = {"seed": self.seed, "image_size": self.image_size, "clinics": {}}
        for name, clinic in self.clinics.items():
            out["clinics"][name] = {
                "spec": {"name": clinic.spec.name, "gamma": clinic.spec.gamma,
                         "noise_sigma": clinic.spec.noise_sigma,
                         "blur_width": clinic.spec.blur_width,
                         "bias_strength": clinic.spec.bias_strength,
                         "spacing": list(clinic.spec.spacing),
                         "lesion_contrast": clinic.spec.lesion_contrast},
                "domain_id": clinic.domain_id,
                "subject_seeds": list(clinic.subject_seeds),
                "fractions": list(clinic.split.fractions),
                "splits": {part: [s.sample_id for s in getattr(clinic.split, part)]
                           for part in ("train", "val", "test")},
            }
        return out


def build_benchmark(n_subjects_per_clinic: int, clinic_specs, split_policy=None,
                    seed: int = 0, image_size: int = 64) -> Benchmark:
    """Generate per-clinic subject sets and train/val/test splits.

    split_policy maps clinic name to fractions; unlisted clinics get the
    target protocol, and when no policy is given the first clinic is the
    source."""
    specs = list(clinic_specs)
    if len(specs) < 2:
        raise GenerationError("need at least two clinics")
    if n_subjects_per_clinic < 4:
        raise GenerationError("need at least 4 subjects per clinic to split")
    if split_policy is None:
        split_policy = {specs[0].name: SOURCE_FRACTIONS}
    root = SeededRng(seed)
    clinics = {}
    for ci, spec in enumerate(specs):
        seeds = root.child(f"subjects:{spec.name}").integers(0, 2 ** 62, size=n_subjects_per_clinic)
        samples = []
        for i, subj_seed in enumerate(seeds):
            subject = make_subject(int(subj_seed), image_size)
            samples.append(render(subject, spec, domain_id=ci,
                                  sample_id=f"{spec.name}_{i:03d}"))
        fractions = split_policy.get(spec.name, TARGET_FRACTIONS)
        split = make_splits(samples, fractions, root.child(f"split:{spec.name}"))
        clinics[spec.name] = ClinicData(spec, ci, split, tuple(int(s) for s in seeds))
    return Benchmark(clinics=clinics, seed=seed, image_size=image_size)


def build_paired_set(n_subjects: int, spec_a: DomainSpec, spec_b: DomainSpec,
                     seed: int = 0, image_size: int = 64,
                     domain_ids: tuple[int, int] = (0, 1)) -> list:
    """Subjects imaged under two acquisition profiles in one session."""
    root = SeededRng(seed)
    seeds = root.child("paired_subjects").integers(0, 2 ** 62, size=n_subjects)
    pairs = []
    for i, subj_seed in enumerate(seeds):
        subject = make_subject(int(subj_seed), image_size)
        pairs.append(render_paired(subject, spec_a, spec_b, domain_ids,
                                   sample_id=f"pair_{i:03d}"))
    return pairs


def save_benchmark(bench: Benchmark, directory) -> None:
    directory = Path(directory)
    for name, clinic in bench.clinics.items():
        for part in ("train", "val", "test"):
            for s in getattr(clinic.split, part):
                save_sample(directory / name, s)
    with open(directory / "manifest.json", "w") as f:
        json.dump(bench.manifest(), f, indent=1, sort_keys=True)


def load_benchmark(directory) -> Benchmark:
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    clinics = {}
    for name, entry in manifest["clinics"].items():
        sp = entry["spec"]
        spec = DomainSpec(sp["name"], sp["gamma"], sp["noise_sigma"], sp["blur_width"],
                          sp["bias_strength"], tuple(sp["spacing"]), sp["lesion_contrast"])
        parts = {part: tuple(load_sample(directory / name, sid)
                             for sid in entry["splits"][part])
                 for part in ("train", "val", "test")}
        split = DatasetSplit(parts["train"], parts["val"], parts["test"],
                             tuple(entry["fractions"]))
        clinics[name] = ClinicData(spec, entry["domain_id"], split,
                                   tuple(entry["subject_seeds"]))
    return Benchmark(clinics=clinics, seed=manifest["seed"],
                     image_size=manifest["image_size"])


def mean_intensity_split_accuracy(images_a, images_b) -> float:
    """Accuracy of the best mean-intensity threshold between two image sets;
    the cheap detectability probe used to size domain shifts."""
    ma = np.array([im.pixels.mean() for im in images_a])
    mb = np.array([im.pixels.mean() for im in images_b])
    thr = (ma.mean() + mb.mean()) / 2.0
    if ma.mean() <= mb.mean():
        correct = (ma <= thr).sum() + (mb > thr).sum()
    else:
        correct = (ma > thr).sum() + (mb <= thr).sum()
    return float(correct) / (len(ma) + len(mb))
