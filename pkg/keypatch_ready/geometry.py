# -*- coding: utf-8 -*-
"""
Projective geometry for dataset synthesis
Constrained random homographies, point mapping, warped-circle analysis and
compositing of warped rasters onto a canvas.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import cv2
import numpy as np

from .errors import (
    ConstraintInfeasibleError,
    DegenerateProjectionError,
    InvalidArgumentError,
    OutOfBoundsPlacementError,
)
from .patch_designs import MIN_RADIUS_PX, disk_alpha

DET_EPS = 1e-9
DENOM_EPS = 1e-12


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform normalized so that m[2][2] == 1"""
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidArgumentError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < DENOM_EPS:
            raise InvalidArgumentError("homography m[2][2] is zero and cannot be normalized")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise InvalidArgumentError("homography is singular")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx, ty):
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def from_list(cls, values):
        """Row-major 9 numbers, as stored in annotation records"""
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))

    def to_list(self):
        return [float(v) for v in self.m.ravel()]

    def inverse(self):
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other):
        return Homography(self.m @ other.m)


@dataclass
class WarpConstraints:
    """
    Limits on how a patch may be deformed when placed in an image.

    min_axis_ratio is the short/long axis ratio of the warped bounding circle;
    0.2 corresponds to a (long - short) / long difference of at most 0.8.
    """
    min_short_axis_px: float = 10.0
    min_axis_ratio: float = 0.2
    max_patches_per_image: int = 10
    image_size: Tuple[int, int] = (640, 480)
    max_radius_px: Optional[float] = None
    max_perspective: float = 0.25
    max_rejections: int = 100
    max_redraws: int = 50

    def validate(self):
        if self.min_short_axis_px < 1:
            raise InvalidArgumentError("min_short_axis_px must be >= 1")
        if not 0.0 < self.min_axis_ratio <= 1.0:
            raise InvalidArgumentError("min_axis_ratio must be in (0, 1]")
        if self.max_patches_per_image < 0:
            raise InvalidArgumentError("max_patches_per_image must be >= 0")
        width, height = self.image_size
        if width <= 0 or height <= 0:
            raise InvalidArgumentError(f"image_size {self.image_size} must be positive")
        if self.max_perspective < 0:
            raise InvalidArgumentError("max_perspective must be >= 0")
        return self

    def radius_ceiling(self):
        width, height = self.image_size
        ceiling = min(width, height) / 6.0 if self.max_radius_px is None else float(self.max_radius_px)
        return min(ceiling, min(width, height) / 2.0)


@dataclass(frozen=True)
class Ellipse:
    """Image of a circle under a homography"""
    center: Tuple[float, float]
    semi_major: float
    semi_minor: float
    angle: float

    @property
    def short_axis(self):
        return 2.0 * self.semi_minor

    @property
    def axis_ratio(self):
        return self.semi_minor / self.semi_major

    @property
    def mean_radius(self):
        return math.sqrt(self.semi_major * self.semi_minor)

    def contains(self, point):
        dx = point[0] - self.center[0]
        dy = point[1] - self.center[1]
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (dx * c + dy * s) / self.semi_major
        v = (-dx * s + dy * c) / self.semi_minor
        return u * u + v * v <= 1.0


# ============================================================================
# POINT MAPPING
# ============================================================================

def apply_homography(h, p):
    """Map one point through h; raises DegenerateProjectionError at infinity"""
    x, y = float(p[0]), float(p[1])
    m = h.m
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) < DENOM_EPS:
        raise DegenerateProjectionError(f"point ({x}, {y}) maps to infinity")
    return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w)


def apply_homography_points(h, points):
    """Vectorized apply_homography for an (N, 2) array"""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    homog = np.hstack([pts, np.ones((len(pts), 1))]) @ h.m.T
    if np.any(np.abs(homog[:, 2]) < DENOM_EPS):
        raise DegenerateProjectionError("at least one point maps to infinity")
    return homog[:, :2] / homog[:, 2:3]


def circle_boundary_points(center, radius, n=360):
    angles = np.arange(n) * (2.0 * math.pi / n)
    return np.stack([center[0] + radius * np.cos(angles),
                     center[1] + radius * np.sin(angles)], axis=1)


def warped_ellipse(h, center, radius):
    """
    Analytic image of the circle (center, radius) under h.

    The circle conic Q is carried to H^-T Q H^-1; center and semi-axes are
    read off its affine part.
    """
    cx, cy = float(center[0]), float(center[1])
    q = np.array([[1.0, 0.0, -cx],
                  [0.0, 1.0, -cy],
                  [-cx, -cy, cx * cx + cy * cy - radius * radius]])
    h_inv = np.linalg.inv(h.m)
    conic = h_inv.T @ q @ h_inv
    a = conic[:2, :2]
    b = conic[:2, 2]
    c = conic[2, 2]
    if np.linalg.det(a) <= 0:
        raise DegenerateProjectionError("circle does not map to an ellipse")
    if a[0, 0] < 0:
        a, b, c = -a, -b, -c
    x0 = -np.linalg.solve(a, b)
    k = -(b @ x0 + c)
    if k <= 0:
        raise DegenerateProjectionError("circle maps to an empty conic")
    eigvals, eigvecs = np.linalg.eigh(a)
    semi_major = math.sqrt(k / eigvals[0])
    semi_minor = math.sqrt(k / eigvals[1])
    angle = math.atan2(eigvecs[1, 0], eigvecs[0, 0])
    return Ellipse(center=(float(x0[0]), float(x0[1])),
                   semi_major=semi_major, semi_minor=semi_minor, angle=angle)


# ============================================================================
# CONSTRAINED SAMPLING
# ============================================================================

def _rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def satisfies_constraints(ellipse, constraints):
    return (ellipse.short_axis >= constraints.min_short_axis_px
            and ellipse.axis_ratio >= constraints.min_axis_ratio)


def sample_patch_homography(rng, constraints, source_radius_px, source_center=None):
    """
    Draw a random placement transform for a patch raster.

    Scale, anisotropic stretch, in-plane rotation and a small perspective
    term are composed in patch-centered coordinates, then translated so the
    keypoint lands inside the image with a margin of the warped short
    semi-axis. Draws are rejected until the warped bounding circle satisfies
    `constraints`; after `max_rejections` failures the scale is re-drawn.

    Parameters:
    -----------
    rng : numpy.random.Generator
    constraints : WarpConstraints
    source_radius_px : float
        Radius of the patch raster being placed.
    source_center : tuple, optional
        Keypoint in raster pixels; defaults to (radius, radius).

    Returns:
    --------
    Homography
    """
    constraints.validate()
    if source_radius_px < MIN_RADIUS_PX:
        raise InvalidArgumentError(f"source_radius_px must be >= {MIN_RADIUS_PX}")
    width, height = constraints.image_size
    if constraints.min_short_axis_px > min(width, height):
        raise ConstraintInfeasibleError(
            f"min_short_axis_px {constraints.min_short_axis_px} exceeds image size {constraints.image_size}")
    if source_center is None:
        source_center = (float(source_radius_px), float(source_radius_px))
    to_origin = Homography.translation(-source_center[0], -source_center[1])
    ceiling = constraints.radius_ceiling()

    for _ in range(constraints.max_redraws):
        ratio = rng.uniform(constraints.min_axis_ratio, 1.0)
        lo = constraints.min_short_axis_px / (2.0 * math.sqrt(ratio))
        target_radius = rng.uniform(lo, max(lo, ceiling))
        scale = target_radius / source_radius_px
        stretch = np.diag([scale / math.sqrt(ratio), scale * math.sqrt(ratio)])

        for _ in range(constraints.max_rejections):
            linear = _rotation(rng.uniform(0.0, 2.0 * math.pi)) @ stretch @ _rotation(rng.uniform(0.0, 2.0 * math.pi))
            tilt = rng.uniform(-1.0, 1.0, size=2) * constraints.max_perspective / source_radius_px
            local = np.array([[linear[0, 0], linear[0, 1], 0.0],
                              [linear[1, 0], linear[1, 1], 0.0],
                              [tilt[0], tilt[1], 1.0]])
            try:
                shape = Homography(local) @ to_origin
                ellipse = warped_ellipse(shape, source_center, source_radius_px)
            except (DegenerateProjectionError, InvalidArgumentError):
                continue
            if not satisfies_constraints(ellipse, constraints):
                continue
            margin = ellipse.semi_minor
            if 2.0 * margin >= width or 2.0 * margin >= height:
                continue
            tx = rng.uniform(margin, width - margin)
            ty = rng.uniform(margin, height - margin)
            return Homography.translation(tx, ty) @ shape

    raise ConstraintInfeasibleError(
        f"no placement satisfied {constraints} after {constraints.max_redraws} scale draws")


# ============================================================================
# COMPOSITING
# ============================================================================

def composite_warped(h, pixels, alpha, canvas, inplace=False):
    """
    Inverse-map `pixels` through h with bilinear resampling and alpha-blend
    the result over `canvas` (painter's order: the new raster wins).

    Returns:
    --------
    numpy.ndarray
        The updated canvas.
    """
    out = canvas if inplace else canvas.copy()
    src_h, src_w = pixels.shape[:2]
    corners = np.array([[-0.5, -0.5], [src_w - 0.5, -0.5],
                        [src_w - 0.5, src_h - 0.5], [-0.5, src_h - 0.5]])
    footprint = apply_homography_points(h, corners)
    canvas_h, canvas_w = out.shape[:2]
    x0 = max(int(math.floor(footprint[:, 0].min())), 0)
    y0 = max(int(math.floor(footprint[:, 1].min())), 0)
    x1 = min(int(math.ceil(footprint[:, 0].max())) + 1, canvas_w)
    y1 = min(int(math.ceil(footprint[:, 1].max())) + 1, canvas_h)
    if x0 >= x1 or y0 >= y1:
        raise OutOfBoundsPlacementError("warped footprint lies entirely outside the canvas")

    local = Homography.translation(-x0, -y0) @ h
    size = (x1 - x0, y1 - y0)
    warped = cv2.warpPerspective(pixels, local.m, size, flags=cv2.INTER_LINEAR,
                                 borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    weight = cv2.warpPerspective(alpha.astype(np.float32), local.m, size, flags=cv2.INTER_LINEAR,
                                 borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    region = out[y0:y1, x0:x1].astype(np.float32)
    warped = warped.astype(np.float32)
    if region.ndim == 3 and warped.ndim == 2:
        warped = warped[..., None]
        weight = weight[..., None]
    blended = weight * warped + (1.0 - weight) * region
    out[y0:y1, x0:x1] = np.clip(np.rint(blended), 0, 255).astype(out.dtype)
    return out


def warp_raster_onto(h, raster, canvas, inplace=False):
    """
    Composite a patch raster onto the canvas.

    The footprint is the patch disk: raster pixels outside `disk_alpha`
    (the square's corners) never reach the canvas, so under the identity
    homography the canvas equals the raster inside the disk and is unchanged
    outside it.

    Returns:
    --------
    tuple : (canvas, warped_center, warped_radius)
        warped_radius is the geometric mean of the warped ellipse semi-axes.
    """
    canvas = composite_warped(h, raster.pixels, disk_alpha(raster.radius_px), canvas, inplace=inplace)
    warped_center = apply_homography(h, raster.center)
    ellipse = warped_ellipse(h, raster.center, raster.radius_px)
    return canvas, warped_center, ellipse.mean_radius
