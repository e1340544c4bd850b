"""Online augmentation operators: affine geometry, multiplicative bias fields,
and k-space motion ghosting, plus composition with a replayable record.

Every operator is a pure function of (input, params). Spatial consistency
between predictions on an image and on its augmented version is only
well-posed in a common coordinate frame, so ``compose_and_apply`` returns an
``AppliedRecord`` whose geometric component can be replayed on prediction
maps via ``replay_spatial``.

Coordinate conventions: pixel coordinates are (row, col); affine transforms
act about the image center ((H-1)/2, (W-1)/2); out-of-domain samples are
filled with 0 (background intensity). The forward map of ``AffineParams`` is

    y = center + translation + R(rotation) @ Shear(sx, sy) @ Scale(cx, cy) @ (x - center)

and images are resampled through its inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import BinMask, Image2D, ProbMask, SeededRng


class AugmentError(ValueError):
    pass


_OPERATORS = ("geometric", "bias", "motion")


# ---------------------------------------------------------------------------
# parameter types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineParams:
    """Rotation/shear/scale (plus optional pixel translation) about the
    image center. Default translation is degenerate so pure paper-style
    draws are unaffected by it."""

    rotation_deg: float = 0.0
    shear: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)
    translation: tuple[float, float] = (0.0, 0.0)
    interpolation: str = "linear"

    def __post_init__(self):
        if self.interpolation not in ("linear", "nearest"):
            raise AugmentError(f"unknown interpolation {self.interpolation!r}")
        if abs(np.linalg.det(self.linear_part())) < 1e-12:
            raise AugmentError("affine transform is singular")

    def linear_part(self) -> np.ndarray:
        """2x2 forward matrix R @ Shear @ Scale in (row, col) coordinates."""
        th = math.radians(self.rotation_deg)
        rot = np.array([[math.cos(th), -math.sin(th)],
                        [math.sin(th), math.cos(th)]])
        sx, sy = self.shear
        shear = np.array([[1.0, sx], [sy, 1.0]])
        scale = np.diag([self.scale[0], self.scale[1]])
        return rot @ shear @ scale

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous forward matrix in center-origin coordinates."""
        hom = np.eye(3)
        hom[:2, :2] = self.linear_part()
        hom[:2, 2] = self.translation
        return hom

    def inverse(self) -> "AffineParams":
        """Parameters of the exact inverse map (expressed directly as a
        matrix; rotation/shear/scale fields are not recovered)."""
        return _MatrixAffine(self)


class _MatrixAffine(AffineParams):
    """Inverse wrapper: forwards to the stored matrix instead of recomposing."""

    def __init__(self, forward: AffineParams):
        object.__setattr__(self, "rotation_deg", -forward.rotation_deg)
        object.__setattr__(self, "shear", forward.shear)
        object.__setattr__(self, "scale", forward.scale)
        object.__setattr__(self, "translation", forward.translation)
        object.__setattr__(self, "interpolation", forward.interpolation)
        inv = np.linalg.inv(forward.matrix())
        object.__setattr__(self, "_matrix", inv)

    def matrix(self) -> np.ndarray:
        return self._matrix

    def linear_part(self) -> np.ndarray:
        return self._matrix[:2, :2]


@dataclass(frozen=True)
class BiasFieldParams:
    """Coefficients of a 2D polynomial P over normalized coordinates
    (u, v) in [-1, 1]^2 (u along rows, v along cols); the applied field is
    exp(P), hence strictly positive. Monomials are ordered by total degree
    d = 0..order, and within a degree as u^d v^0, u^(d-1) v^1, ..., u^0 v^d."""

    order: int = 3
    coefficients: tuple = ()

    def __post_init__(self):
        if self.order < 0:
            raise AugmentError("polynomial order must be nonnegative")
        n = (self.order + 1) * (self.order + 2) // 2
        coeffs = tuple(float(c) for c in self.coefficients)
        if len(coeffs) != n:
            raise AugmentError(f"order {self.order} needs {n} coefficients, got {len(coeffs)}")
        if not all(math.isfinite(c) for c in coeffs):
            raise AugmentError("coefficients must be finite")
        object.__setattr__(self, "coefficients", coeffs)

    def field(self, shape: tuple[int, int]) -> np.ndarray:
        u = np.linspace(-1.0, 1.0, shape[0])[:, None]
        v = np.linspace(-1.0, 1.0, shape[1])[None, :]
        poly = np.zeros(shape)
        k = 0
        for d in range(self.order + 1):
            for j in range(d + 1):
                poly += self.coefficients[k] * u ** (d - j) * v ** j
                k += 1
        return np.exp(poly)


@dataclass(frozen=True)
class MotionEvent:
    """One movement during acquisition: from this event's onset (fraction of
    k-space rows, centric order) onward, lines come from the rigidly moved
    object."""

    onset: float
    rotation_deg: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.onset < 1.0:
            raise AugmentError(f"onset fraction must lie in (0, 1), got {self.onset}")


@dataclass(frozen=True)
class MotionParams:
    events: tuple = ()

    def __post_init__(self):
        onsets = [e.onset for e in self.events]
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise AugmentError(f"onset fractions must be strictly increasing, got {onsets}")


@dataclass(frozen=True)
class AugmentationSpec:
    """Which operators run and from which ranges their parameters are drawn.

    ``enabled`` is a subset of {geometric, bias, motion}; the empty tuple is
    the identity. Interval fields are (low, high) with low <= high."""

    enabled: tuple = _OPERATORS
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    shear: tuple[float, float] = (-0.5, 0.5)
    scale: tuple[float, float] = (0.75, 1.5)
    translation: tuple[float, float] = (0.0, 0.0)
    bias_order: int = 3
    bias_coeff: tuple[float, float] = (-0.3, 0.3)
    motion_events: tuple[int, int] = (1, 2)
    motion_rotation: tuple[float, float] = (-10.0, 10.0)
    motion_translation: tuple[float, float] = (-3.0, 3.0)
    seed_key: str = "augment"

    def __post_init__(self):
        enabled = tuple(op for op in _OPERATORS if op in self.enabled)
        unknown = set(self.enabled) - set(_OPERATORS)
        if unknown:
            raise AugmentError(f"unknown operators {sorted(unknown)}")
        object.__setattr__(self, "enabled", enabled)
        for name in ("rotation_deg", "shear", "scale", "translation",
                     "bias_coeff", "motion_rotation", "motion_translation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise AugmentError(f"inverted interval for {name}: ({lo}, {hi})")
        if self.motion_events[0] > self.motion_events[1] or self.motion_events[0] < 0:
            raise AugmentError(f"bad motion event count range {self.motion_events}")

    @classmethod
    def none(cls) -> "AugmentationSpec":
        return cls(enabled=())

    @classmethod
    def geometric_only(cls) -> "AugmentationSpec":
        return cls(enabled=("geometric",))

    @classmethod
    def mri_only(cls) -> "AugmentationSpec":
        return cls(enabled=("bias", "motion"))

    @classmethod
    def all_ops(cls) -> "AugmentationSpec":
        return cls(enabled=_OPERATORS)


@dataclass(frozen=True)
class AppliedRecord:
    """Concrete parameters drawn by one compose_and_apply call. The affine
    component is what replay_spatial re-applies to prediction maps."""

    affine: AffineParams | None = None
    bias: BiasFieldParams | None = None
    motion: MotionParams | None = None

    def to_dict(self) -> dict:
        out: dict = {}
        if self.affine is not None:
            out["affine"] = {"rotation_deg": self.affine.rotation_deg,
                             "shear": list(self.affine.shear),
                             "scale": list(self.affine.scale),
                             "translation": list(self.affine.translation)}
        if self.bias is not None:
            out["bias"] = {"order": self.bias.order,
                           "coefficients": list(self.bias.coefficients)}
        if self.motion is not None:
            out["motion"] = [{"onset": e.onset, "rotation_deg": e.rotation_deg,
                              "translation": list(e.translation)}
                             for e in self.motion.events]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AppliedRecord":
        affine = bias = motion = None
        if "affine" in d:
            a = d["affine"]
            affine = AffineParams(a["rotation_deg"], tuple(a["shear"]),
                                  tuple(a["scale"]), tuple(a["translation"]))
        if "bias" in d:
            bias = BiasFieldParams(d["bias"]["order"], tuple(d["bias"]["coefficients"]))
        if "motion" in d:
            motion = MotionParams(tuple(
                MotionEvent(e["onset"], e["rotation_deg"], tuple(e["translation"]))
                for e in d["motion"]))
        return cls(affine=affine, bias=bias, motion=motion)


# ---------------------------------------------------------------------------
# parameter sampling
# ---------------------------------------------------------------------------

def _draw(rng: SeededRng, interval) -> float:
    lo, hi = interval
    return lo if lo == hi else float(rng.uniform(lo, hi))


def sample_affine(rng: SeededRng, spec: AugmentationSpec = AugmentationSpec()) -> AffineParams:
    return AffineParams(
        rotation_deg=_draw(rng, spec.rotation_deg),
        shear=(_draw(rng, spec.shear), _draw(rng, spec.shear)),
        scale=(_draw(rng, spec.scale), _draw(rng, spec.scale)),
        translation=(_draw(rng, spec.translation), _draw(rng, spec.translation)),
    )


def sample_bias_field(rng: SeededRng, spec: AugmentationSpec = AugmentationSpec()) -> BiasFieldParams:
    n = (spec.bias_order + 1) * (spec.bias_order + 2) // 2
    return BiasFieldParams(spec.bias_order,
                           tuple(rng.uniform(*spec.bias_coeff, size=n)))


def sample_motion(rng: SeededRng, spec: AugmentationSpec = AugmentationSpec()) -> MotionParams:
    n = int(rng.integers(spec.motion_events[0], spec.motion_events[1] + 1))
    if n == 0:
        return MotionParams(())
    onsets = np.sort(rng.uniform(0.1, 0.9, size=n))
    while np.any(np.diff(onsets) <= 0):  # measure-zero ties; redraw keeps the stream deterministic
        onsets = np.sort(rng.uniform(0.1, 0.9, size=n))
    return MotionParams(tuple(
        MotionEvent(float(o),
                    rotation_deg=_draw(rng, spec.motion_rotation),
                    translation=(_draw(rng, spec.motion_translation),
                                 _draw(rng, spec.motion_translation)))
        for o in onsets))


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def _warp(arr: np.ndarray, p: AffineParams, interpolation: str) -> np.ndarray:
    center = (np.asarray(arr.shape, dtype=np.float64) - 1.0) / 2.0
    forward = p.matrix()
    inv = np.linalg.inv(forward)
    lin = inv[:2, :2]
    # output[y] = input[lin @ y + off]; off folds in the center conjugation
    off = center + inv[:2, 2] - lin @ center
    order = 1 if interpolation == "linear" else 0
    return ndimage.affine_transform(np.asarray(arr, dtype=np.float64), lin, offset=off,
                                    order=order, mode="constant", cval=0.0)


def apply_affine(image: Image2D, p: AffineParams) -> Image2D:
    return image.with_pixels(_warp(image.pixels, p, p.interpolation))


def apply_affine_to_mask(mask, p: AffineParams):
    """Warp a mask by the same map as apply_affine. Binary masks use nearest
    neighbor so they stay binary; probability maps interpolate linearly
    (convex combinations with a 0 fill stay in [0, 1])."""
    if isinstance(mask, BinMask):
        return BinMask(_warp(mask.labels, p, "nearest").astype(np.uint8))
    if isinstance(mask, ProbMask):
        return ProbMask(np.clip(_warp(mask.probs, p, "linear"), 0.0, 1.0))
    raise TypeError(f"expected BinMask or ProbMask, got {type(mask)}")


def apply_bias_field(image: Image2D, b: BiasFieldParams) -> Image2D:
    return image.with_pixels(image.pixels * b.field(image.shape))


def apply_kspace_motion(image: Image2D, m: MotionParams) -> Image2D:
    """Splice k-space rows (centric order, low frequencies in the middle)
    from rigidly moved copies of the object, one block per motion event."""
    if not m.events:
        return image
    h, w = image.shape
    if h % 2 or w % 2:
        raise AugmentError(f"k-space motion needs even image dimensions, got {(h, w)}")
    spectrum = np.fft.fftshift(np.fft.fft2(image.pixels), axes=0)
    for ev in m.events:
        moved = _warp(image.pixels,
                      AffineParams(rotation_deg=ev.rotation_deg, translation=ev.translation),
                      "linear")
        start = int(round(ev.onset * h))
        spectrum[start:] = np.fft.fftshift(np.fft.fft2(moved), axes=0)[start:]
    out = np.fft.ifft2(np.fft.ifftshift(spectrum, axes=0)).real
    return image.with_pixels(out)


def compose_and_apply(image: Image2D, spec: AugmentationSpec,
                      rng: SeededRng) -> tuple[Image2D, AppliedRecord]:
    """Apply the enabled operators in the fixed order geometric -> bias ->
    motion, drawing parameters from ``rng``, and return the augmented image
    with the record needed to replay its spatial component."""
    out = image
    affine = bias = motion = None
    if "geometric" in spec.enabled:
        affine = sample_affine(rng, spec)
        out = apply_affine(out, affine)
    if "bias" in spec.enabled:
        bias = sample_bias_field(rng, spec)
        out = apply_bias_field(out, bias)
    if "motion" in spec.enabled:
        motion = sample_motion(rng, spec)
        out = apply_kspace_motion(out, motion)
    return out, AppliedRecord(affine=affine, bias=bias, motion=motion)


def replay_spatial(record: AppliedRecord, array: np.ndarray,
                   interpolation: str = "linear") -> np.ndarray:
    """Apply the record's geometric component to a same-sized array, using
    the identical coordinate map as the original call. Intensity-only
    records return the input unchanged."""
    if record.affine is None:
        return np.asarray(array, dtype=np.float64)
    return _warp(array, record.affine, interpolation)
