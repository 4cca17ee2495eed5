# -*- coding: utf-8 -*-
"""
Image deteriorations
Blur, brightness and dimming, shadows, rain and Gaussian noise, used both as
training augmentations and as evaluation sweep conditions.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import cv2
import numpy as np

from .errors import InvalidArgumentError

KINDS = ("motion_blur", "box_blur", "brightness", "dimming", "shadow", "rain", "gaussian_noise")
BLUR_KINDS = ("motion_blur", "box_blur")
# Blur, Gaussian noise, random shadows and random rain, in the order they are applied
TRAINING_KINDS = ("motion_blur", "gaussian_noise", "shadow", "rain")

DIMMING_BASE = 0.6
SHADOW_FEATHER_PX = 5


@dataclass
class DegradationSpec:
    """
    One deterioration and its parameters.

    Only the fields relevant to `kind` are used:
    kernel_px for blurs, factor for brightness (and dimming when k is None),
    k for dimming (factor = 0.6 ** k), sigma for Gaussian noise, seed for
    every kind that draws random numbers.
    """
    kind: str
    kernel_px: Optional[int] = None
    factor: Optional[float] = None
    k: Optional[float] = None
    sigma: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown degradation kind '{self.kind}'")
        if self.kind in BLUR_KINDS:
            if self.kernel_px is None or int(self.kernel_px) != self.kernel_px:
                raise InvalidArgumentError(f"{self.kind} needs an integer kernel_px")
            if self.kernel_px < 3 or self.kernel_px % 2 == 0:
                raise InvalidArgumentError(f"kernel_px must be odd and >= 3, got {self.kernel_px}")
        if self.sigma is not None and self.sigma < 0:
            raise InvalidArgumentError(f"sigma must be >= 0, got {self.sigma}")
        if self.kind == "gaussian_noise" and self.sigma is None:
            raise InvalidArgumentError("gaussian_noise needs sigma")
        if self.k is not None and self.k < 0:
            raise InvalidArgumentError(f"k must be >= 0, got {self.k}")
        if self.factor is not None and not 0.0 < self.factor <= 2.0:
            raise InvalidArgumentError(f"factor must be in (0, 2], got {self.factor}")
        if self.kind == "brightness" and self.factor is None:
            raise InvalidArgumentError("brightness needs factor")
        if self.kind == "dimming" and self.k is None and self.factor is None:
            raise InvalidArgumentError("dimming needs k or factor")

    def to_dict(self):
        return {key: value for key, value in asdict(self).items() if value is not None}

    @classmethod
    def from_dict(cls, record):
        return cls(**record)


@dataclass
class AugmentRanges:
    """Parameter ranges for randomly drawn deteriorations"""
    probability: float = 0.5
    motion_blur_kernel: Tuple[int, int] = (3, 15)
    noise_sigma: Tuple[float, float] = (5.0, 30.0)
    brightness_factor: Tuple[float, float] = (0.6, 1.4)
    shadow_factor: Tuple[float, float] = (0.3, 0.7)
    rain_drops: Tuple[int, int] = (50, 300)
    box_blur_kernel: Tuple[int, int] = (3, 7)
    kinds: Tuple[str, ...] = field(default_factory=lambda: TRAINING_KINDS)


def dimming_factor(k):
    """Intensity multiplier f = 0.6 ** k"""
    if k < 0:
        raise InvalidArgumentError(f"k must be >= 0, got {k}")
    return DIMMING_BASE ** k


# ============================================================================
# INDIVIDUAL DETERIORATIONS
# ============================================================================

def _scale_intensity(img, factor):
    return np.clip(np.rint(img.astype(np.float64) * factor), 0, 255).astype(np.uint8)


def _motion_kernel(size, angle_deg):
    kernel = np.zeros((size, size), dtype=np.float32)
    kernel[size // 2, :] = 1.0
    rotation = cv2.getRotationMatrix2D((size / 2 - 0.5, size / 2 - 0.5), angle_deg, 1.0)
    kernel = cv2.warpAffine(kernel, rotation, (size, size))
    return kernel / kernel.sum()


def motion_blur(img, kernel_px, rng):
    kernel = _motion_kernel(kernel_px, rng.uniform(0.0, 180.0))
    return cv2.filter2D(img, -1, kernel, borderType=cv2.BORDER_REFLECT)


def box_blur(img, kernel_px):
    """Uniform kernel; every pixel spreads over kernel_px x kernel_px"""
    return cv2.blur(img, (kernel_px, kernel_px), borderType=cv2.BORDER_REFLECT)


def gaussian_noise(img, sigma, rng):
    if sigma == 0:
        return img.copy()
    noise = rng.normal(0.0, sigma, size=img.shape)
    return np.clip(np.rint(img.astype(np.float64) + noise), 0, 255).astype(np.uint8)


def random_shadow(img, rng, factor_range=(0.3, 0.7)):
    """Darken a random convex quadrilateral with feathered edges"""
    height, width = img.shape[:2]
    center = rng.uniform([0.0, 0.0], [width, height])
    radii = rng.uniform(0.15, 0.6, size=4) * min(width, height)
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=4))
    points = np.stack([center[0] + radii * np.cos(angles),
                       center[1] + radii * np.sin(angles)], axis=1)
    hull = cv2.convexHull(np.rint(points).astype(np.int32))
    mask = np.zeros((height, width), dtype=np.float32)
    cv2.fillConvexPoly(mask, hull, 1.0)
    feather = 2 * SHADOW_FEATHER_PX + 1
    mask = cv2.blur(mask, (feather, feather), borderType=cv2.BORDER_REFLECT)
    darkness = rng.uniform(*factor_range)
    gain = 1.0 - mask * (1.0 - darkness)
    if img.ndim == 3:
        gain = gain[..., None]
    return np.clip(np.rint(img.astype(np.float64) * gain), 0, 255).astype(np.uint8)


def random_rain(img, rng, drop_range=(50, 300)):
    """Overlay short bright slanted streaks, then soften slightly"""
    height, width = img.shape[:2]
    out = img.copy()
    n_drops = int(rng.integers(drop_range[0], drop_range[1] + 1))
    slant = rng.uniform(-10.0, 10.0)
    color = (200, 200, 200) if img.ndim == 3 else 200
    for _ in range(n_drops):
        length = rng.uniform(8.0, 20.0)
        x = rng.uniform(0.0, width)
        y = rng.uniform(0.0, height - length)
        end = (int(round(x + slant)), int(round(y + length)))
        cv2.line(out, (int(round(x)), int(round(y))), end, color, 1)
    return cv2.blur(out, (3, 3), borderType=cv2.BORDER_REFLECT)


# ============================================================================
# DISPATCH
# ============================================================================

def apply(spec, img, rng=None):
    """
    Apply one deterioration.

    Randomness comes from `spec.seed` when set, so a stored spec replays
    bit-exactly; otherwise from `rng`.

    Returns:
    --------
    numpy.ndarray
        uint8 image with the input's shape.
    """
    if img.size == 0:
        raise InvalidArgumentError("cannot degrade an empty image")
    if img.dtype != np.uint8:
        raise InvalidArgumentError(f"expected uint8 image, got {img.dtype}")
    if spec.seed is not None:
        rng = np.random.default_rng(spec.seed)
    elif rng is None:
        rng = np.random.default_rng()

    kind = spec.kind
    if kind == "motion_blur":
        return motion_blur(img, spec.kernel_px, rng)
    if kind == "box_blur":
        return box_blur(img, spec.kernel_px)
    if kind == "brightness":
        return _scale_intensity(img, spec.factor)
    if kind == "dimming":
        factor = dimming_factor(spec.k) if spec.k is not None else spec.factor
        return _scale_intensity(img, factor)
    if kind == "shadow":
        factor_range = (spec.factor, spec.factor) if spec.factor is not None else (0.3, 0.7)
        return random_shadow(img, rng, factor_range)
    if kind == "rain":
        return random_rain(img, rng)
    return gaussian_noise(img, spec.sigma, rng)


def apply_all(specs, img, rng=None):
    for spec in specs:
        img = apply(spec, img, rng)
    return img


# ============================================================================
# RANDOM STACKS
# ============================================================================

def _odd_between(rng, low, high):
    choices = np.arange(low | 1, high + 1, 2)
    return int(rng.choice(choices))


def draw_spec(kind, rng, ranges=None):
    """Draw one seeded DegradationSpec of `kind` with parameters from `ranges`"""
    ranges = AugmentRanges() if ranges is None else ranges
    seed = int(rng.integers(0, 2 ** 31 - 1))
    if kind == "motion_blur":
        return DegradationSpec(kind, kernel_px=_odd_between(rng, *ranges.motion_blur_kernel), seed=seed)
    if kind == "box_blur":
        return DegradationSpec(kind, kernel_px=_odd_between(rng, *ranges.box_blur_kernel), seed=seed)
    if kind == "gaussian_noise":
        return DegradationSpec(kind, sigma=float(rng.uniform(*ranges.noise_sigma)), seed=seed)
    if kind == "brightness":
        return DegradationSpec(kind, factor=float(rng.uniform(*ranges.brightness_factor)), seed=seed)
    if kind == "shadow":
        return DegradationSpec(kind, factor=float(rng.uniform(*ranges.shadow_factor)), seed=seed)
    if kind == "rain":
        return DegradationSpec(kind, seed=seed)
    raise InvalidArgumentError(f"cannot draw random parameters for '{kind}'")


def random_stack(rng, ranges=None, kinds=None, probability=None):
    """Each kind independently included with the given probability"""
    ranges = AugmentRanges() if ranges is None else ranges
    kinds = ranges.kinds if kinds is None else kinds
    probability = ranges.probability if probability is None else probability
    stack = []
    for kind in kinds:
        if rng.random() < probability:
            stack.append(draw_spec(kind, rng, ranges))
    return stack


def training_augmentation_stack(rng, epoch, augment_from_epoch=31, ranges=None):
    """
    Deteriorations applied to one training image at `epoch` (1-based).

    Empty before `augment_from_epoch`; afterwards blur, Gaussian noise,
    shadow and rain are each included with probability 0.5.
    """
    if epoch < augment_from_epoch:
        return []
    return random_stack(rng, ranges, kinds=TRAINING_KINDS)


def validation_deterioration_stack(rng, ranges=None):
    """Fixed validation condition: blur, noise, shadow and rain all applied"""
    return random_stack(rng, ranges, kinds=TRAINING_KINDS, probability=1.0)
