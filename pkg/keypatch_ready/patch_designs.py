# -*- coding: utf-8 -*-
"""
Keypoint patch designs
Four black/white patterns built from semi-circles and rings sharing one center.
The shared center is the keypoint.
"""
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .PatchLibrary import DESIGNS_VERSION, get_library_path
from .errors import InvalidArgumentError, UnsupportedFormatError

MIN_RADIUS_PX = 5
BLACK_RANGE = (0, 120)
WHITE_RANGE = (180, 255)
COLOR_CLASSES = ("black", "white")
SUPERSAMPLE = 4

_FULL = 2.0 * math.pi
_ANGLE_TOL = 1e-9


@dataclass(frozen=True)
class RingElement:
    """One annular sector of a design, in fractions of the patch radius"""
    inner_fraction: float
    outer_fraction: float
    start_angle: float
    end_angle: float
    color_class: str

    def __post_init__(self):
        if not 0.0 <= self.inner_fraction < 1.0:
            raise InvalidArgumentError(f"inner_fraction {self.inner_fraction} outside [0, 1)")
        if not self.inner_fraction < self.outer_fraction <= 1.0:
            raise InvalidArgumentError(
                f"outer_fraction {self.outer_fraction} outside ({self.inner_fraction}, 1]")
        extent = self.extent
        if abs(extent - math.pi) > _ANGLE_TOL and abs(extent - _FULL) > _ANGLE_TOL:
            raise InvalidArgumentError(f"angular extent {extent:.6f} is neither pi nor 2*pi")
        if self.color_class not in COLOR_CLASSES:
            raise InvalidArgumentError(f"color_class must be one of {COLOR_CLASSES}")

    @property
    def extent(self):
        return self.end_angle - self.start_angle

    @property
    def is_full_ring(self):
        return abs(self.extent - _FULL) <= _ANGLE_TOL

    def to_dict(self):
        return {
            "inner_fraction": self.inner_fraction,
            "outer_fraction": self.outer_fraction,
            "start_angle": self.start_angle,
            "end_angle": self.end_angle,
            "color_class": self.color_class,
        }


@dataclass(frozen=True)
class PatchSpec:
    """Parametric geometry of one design; rings are painted in order"""
    type_id: int
    rings: tuple
    nominal_radius: float = 1.0

    def __post_init__(self):
        if self.type_id not in (0, 1, 2, 3):
            raise InvalidArgumentError(f"type_id {self.type_id} not in 0..3")
        if not self.rings:
            raise InvalidArgumentError("a design needs at least one ring element")
        first = self.rings[0]
        if first.inner_fraction != 0.0 or not first.is_full_ring:
            raise InvalidArgumentError("innermost element must be a full disk covering the center")

    def to_dict(self):
        return {"type_id": self.type_id, "rings": [r.to_dict() for r in self.rings]}

    @classmethod
    def from_dict(cls, record):
        return cls(type_id=int(record["type_id"]),
                   rings=tuple(RingElement(**ring) for ring in record["rings"]))


@dataclass
class PatchRaster:
    """Square rendering of a design; `center` is the keypoint in raster pixels"""
    pixels: np.ndarray
    center: tuple
    radius_px: int
    type_id: int
    black_level: int
    white_level: int


# ============================================================================
# DESIGN LIBRARY
# ============================================================================

def parse_designs_document(document):
    """Turn a designs JSON document into a list of PatchSpec"""
    if document.get("format") != "keypatch-designs":
        raise UnsupportedFormatError("not a keypatch designs document")
    if document.get("version") != DESIGNS_VERSION:
        raise UnsupportedFormatError(
            f"designs version {document.get('version')} unsupported (expected {DESIGNS_VERSION})")
    specs = sorted((PatchSpec.from_dict(d) for d in document["designs"]), key=lambda s: s.type_id)
    if [s.type_id for s in specs] != [0, 1, 2, 3]:
        raise UnsupportedFormatError("designs document must define exactly type ids 0, 1, 2, 3")
    return specs


@lru_cache(maxsize=1)
def _load_canonical():
    with open(get_library_path(), "r", encoding="utf-8") as f:
        return tuple(parse_designs_document(json.load(f)))


def canonical_designs():
    """
    The four canonical designs ordered by type_id.

    Returns:
    --------
    list of PatchSpec
        Deterministic list, type ids 0, 1, 2, 3.
    """
    return list(_load_canonical())


def designs_document(specs=None):
    """Versioned JSON-ready document of the designs"""
    specs = canonical_designs() if specs is None else specs
    return {
        "format": "keypatch-designs",
        "version": DESIGNS_VERSION,
        "designs": [s.to_dict() for s in specs],
    }


def write_designs_json(path, specs=None):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(designs_document(specs), f, indent=2)
    return path


# ============================================================================
# RENDERING
# ============================================================================

def _check_levels(black_level, white_level):
    if not BLACK_RANGE[0] <= black_level <= BLACK_RANGE[1]:
        raise InvalidArgumentError(f"black_level {black_level} outside {BLACK_RANGE}")
    if not WHITE_RANGE[0] <= white_level <= WHITE_RANGE[1]:
        raise InvalidArgumentError(f"white_level {white_level} outside {WHITE_RANGE}")


def _sample_offsets(supersample):
    if supersample == 1:
        return np.zeros(1)
    return (np.arange(supersample) + 0.5) / supersample - 0.5


def render_patch(spec, radius_px, black_level=0, white_level=255, rotation=0.0,
                 antialias=True, supersample=SUPERSAMPLE):
    """
    Rasterize a design.

    Parameters:
    -----------
    spec : PatchSpec
    radius_px : int
        Rendered radius; the raster side is 2 * radius_px + 1.
    black_level, white_level : int
        Intensities for the two color classes, within [0, 120] and [180, 255].
    rotation : float
        Radians; rotates the ring pattern about the center.
    antialias : bool
        Supersample `supersample` x `supersample` per pixel and area-average.

    Returns:
    --------
    PatchRaster
    """
    if int(radius_px) != radius_px or radius_px < MIN_RADIUS_PX:
        raise InvalidArgumentError(f"radius_px must be an integer >= {MIN_RADIUS_PX}, got {radius_px}")
    _check_levels(black_level, white_level)
    radius_px = int(radius_px)
    side = 2 * radius_px + 1
    factor = supersample if antialias else 1

    coords = (np.arange(side)[:, None] + _sample_offsets(factor)[None, :]).ravel()
    dy, dx = np.meshgrid(coords - radius_px, coords - radius_px, indexing="ij")
    rho = np.hypot(dx, dy) / radius_px
    theta = np.mod(np.arctan2(dy, dx) - rotation, _FULL)

    levels = {"black": float(black_level), "white": float(white_level)}
    values = np.full(rho.shape, float(white_level))
    for ring in spec.rings:
        mask = (rho >= ring.inner_fraction) & (rho <= ring.outer_fraction)
        if not ring.is_full_ring:
            mask &= np.mod(theta - ring.start_angle, _FULL) < ring.extent
        values[mask] = levels[ring.color_class]

    if factor > 1:
        values = values.reshape(side, factor, side, factor).mean(axis=(1, 3))
    pixels = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    return PatchRaster(pixels=pixels, center=(float(radius_px), float(radius_px)),
                       radius_px=radius_px, type_id=spec.type_id,
                       black_level=int(black_level), white_level=int(white_level))


def disk_alpha(radius_px):
    """Soft-edged disk mask matching a raster of the given radius"""
    side = 2 * radius_px + 1
    yy, xx = np.mgrid[0:side, 0:side]
    dist = np.hypot(xx - radius_px, yy - radius_px)
    return np.clip(radius_px + 0.5 - dist, 0.0, 1.0).astype(np.float32)


# ============================================================================
# ROTATION-INVARIANT TEMPLATE MATCHING
# ============================================================================

def normalized_cross_correlation(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / denom if denom > 0 else 0.0


def template_bank(radius_px, n_rotations=24, specs=None):
    """Clean renders of every design at `n_rotations` evenly spaced rotations"""
    specs = canonical_designs() if specs is None else specs
    angles = [k * _FULL / n_rotations for k in range(n_rotations)]
    return {s.type_id: [render_patch(s, radius_px, rotation=a).pixels for a in angles] for s in specs}


def classify_patch(pixels, bank):
    """
    Nearest-template type of a centered patch raster.

    Returns:
    --------
    tuple : (type_id, best_ncc)
    """
    best_type, best_score = None, -np.inf
    for type_id in sorted(bank):
        score = max(normalized_cross_correlation(pixels, t) for t in bank[type_id])
        if score > best_score:
            best_type, best_score = type_id, score
    return best_type, best_score


def rotational_similarity_matrix(radius_px=64, n_rotations=24, specs=None):
    """
    Pairwise maximum NCC between designs over sampled rotations.

    Entry (i, j) is the best correlation of design i at rotation 0 against
    design j at any of the sampled rotations. Off-diagonal values measure how
    confusable two designs are.
    """
    specs = canonical_designs() if specs is None else specs
    bank = template_bank(radius_px, n_rotations, specs)
    n = len(specs)
    matrix = np.eye(n)
    for i, si in enumerate(specs):
        ref = bank[si.type_id][0]
        for j, sj in enumerate(specs):
            if i != j:
                matrix[i, j] = max(normalized_cross_correlation(ref, t) for t in bank[sj.type_id])
    return matrix
