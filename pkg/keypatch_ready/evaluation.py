# -*- coding: utf-8 -*-
"""
Evaluation
Detection score, ID matching score and average false alarm under the
10%-of-radius matching rule; validation-set scoring; and hexagon-board sweeps
over scale, pitch, blur, dimming and Gaussian noise.
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import console
from .dataset_synth import N_TYPES, KeypointInstance, child_rng, open_backgrounds
from .degradations import DegradationSpec, apply_all, validation_deterioration_stack
from .errors import ConstraintInfeasibleError, InvalidArgumentError
from .geometry import Homography, apply_homography, apply_homography_points, composite_warped, warped_ellipse
from .patch_designs import canonical_designs, disk_alpha, render_patch

EPSILON_FRACTION = 0.1
AXES = ("scale", "pitch", "blur", "dimming", "gaussian_noise")
AXIS_ALIASES = {"noise": "gaussian_noise"}
DEFAULT_LEVELS = {
    "scale": [0.5, 1, 2, 4, 8, 16, 32],
    "pitch": [0, 10, 20, 30, 40, 50, 60],
    "blur": [3, 7, 11, 15],
    "dimming": [10, 20, 30, 40],
    "gaussian_noise": [15, 30, 45, 60],
}
METRIC_ROWS = (("Detection Score", "detection_score"),
               ("ID Matching Score", "id_matching_score"),
               ("Average False Alarm", "average_false_alarm"))

DETERIORATION_STREAM = 2
SWEEP_STREAM_BASE = 10000
BOARD_RASTER_PX = 256
SOURCE_PATCH_RADIUS = 32


@dataclass
class MatchResult:
    """One-to-one pairing of predictions with ground truth in one image"""
    pairs: List[Tuple[int, int, float]]
    unmatched_predictions: List[int]
    unmatched_ground_truth: List[int]
    epsilon_used: List[float]

    @property
    def n_predictions(self):
        return len(self.pairs) + len(self.unmatched_predictions)

    @property
    def n_ground_truth(self):
        return len(self.pairs) + len(self.unmatched_ground_truth)


@dataclass
class EvalReport:
    detection_score: float
    id_matching_score: float
    average_false_alarm: float
    n_images: int
    condition: Dict = field(default_factory=dict)
    n_ground_truth: int = 0
    n_predictions: int = 0
    n_matched: int = 0
    n_id_correct: int = 0
    per_type: Dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


# ============================================================================
# METRICS
# ============================================================================

def match_detections(preds, gts, epsilon_fraction=EPSILON_FRACTION):
    """
    Greedy one-to-one matching by ascending distance.

    A prediction may pair with ground truth j only within
    epsilon_j = epsilon_fraction * radius_px of instance j.
    """
    eps = [epsilon_fraction * g.radius_px for g in gts]
    candidates = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            d = math.hypot(p.x - g.x, p.y - g.y)
            if d <= eps[j]:
                candidates.append((d, i, j))
    candidates.sort()
    used_p, used_g = set(), set()
    pairs = []
    for d, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, d))
    return MatchResult(pairs=pairs,
                       unmatched_predictions=[i for i in range(len(preds)) if i not in used_p],
                       unmatched_ground_truth=[j for j in range(len(gts)) if j not in used_g],
                       epsilon_used=eps)


def detection_score(m, n_gt=None):
    """Matched ground-truth fraction; 1.0 for an empty image with no predictions"""
    n_gt = m.n_ground_truth if n_gt is None else n_gt
    if n_gt < 0:
        raise InvalidArgumentError("n_gt must be >= 0")
    if n_gt == 0:
        return 1.0 if m.n_predictions == 0 else 0.0
    return len(m.pairs) / n_gt


def id_correct_count(m, preds, gts):
    return sum(1 for i, j, _ in m.pairs if preds[i].type_id == gts[j].type_id)


def id_matching_score(m, preds, gts):
    if not m.pairs:
        return 1.0
    return id_correct_count(m, preds, gts) / len(m.pairs)


def average_false_alarm(results):
    """Unmatched predictions per image over a list of MatchResult"""
    if len(results) == 0:
        raise InvalidArgumentError("average_false_alarm needs at least one image")
    return sum(len(m.unmatched_predictions) for m in results) / len(results)


class ScoreAccumulator:
    """Deterministic fold of per-image matches into an EvalReport"""

    def __init__(self, condition=None):
        self.condition = dict(condition or {})
        self.results = []
        self.n_ground_truth = 0
        self.n_matched = 0
        self.n_id_correct = 0

    def add(self, preds, gts):
        m = match_detections(preds, gts)
        self.results.append(m)
        self.n_ground_truth += len(gts)
        self.n_matched += len(m.pairs)
        self.n_id_correct += id_correct_count(m, preds, gts)
        return m

    def report(self):
        n_predictions = sum(m.n_predictions for m in self.results)
        if self.n_ground_truth:
            detection = self.n_matched / self.n_ground_truth
        else:
            detection = 1.0 if n_predictions == 0 else 0.0
        ids = self.n_id_correct / self.n_matched if self.n_matched else 1.0
        false_alarm = average_false_alarm(self.results) if self.results else 0.0
        return EvalReport(detection_score=detection, id_matching_score=ids,
                          average_false_alarm=false_alarm, n_images=len(self.results),
                          condition=self.condition, n_ground_truth=self.n_ground_truth,
                          n_predictions=n_predictions, n_matched=self.n_matched,
                          n_id_correct=self.n_id_correct)


# ============================================================================
# VALIDATION SET
# ============================================================================

def _as_predictor(model_or_predictor, input_scale=1.0, device=None):
    if hasattr(model_or_predictor, "predict"):
        return model_or_predictor
    from .model import Predictor
    return Predictor(model_or_predictor, input_scale=input_scale, device=device)


def evaluate_dataset(model, dataset, deteriorate=False, input_scale=1.0, limit=None, device=None):
    """Score a model (or predictor) on a stored dataset, optionally deteriorated"""
    predictor = _as_predictor(model, input_scale, device)
    seed = dataset.manifest.get("seed", 0)
    count = len(dataset) if limit is None else min(limit, len(dataset))
    acc = ScoreAccumulator({"split": "validation", "deteriorated": bool(deteriorate),
                            "input_scale": input_scale})
    for index in tqdm(range(count), desc="Deteriorated" if deteriorate else "Clean",
                      leave=False, disable=not console.is_verbose()):
        image = dataset.image(index)
        if deteriorate:
            image = apply_all(validation_deterioration_stack(child_rng(seed, index, DETERIORATION_STREAM)), image)
        acc.add(predictor.predict(image), dataset.annotation(index).instances)
    return acc.report()


def run_validation(model, dataset, input_scale=1.0, limit=None, out_dir=None, device=None):
    """
    Score the same validation images without and with the deterioration stack.

    Returns:
    --------
    tuple : (clean EvalReport, deteriorated EvalReport)
    """
    console.section("VALIDATION")
    clean = evaluate_dataset(model, dataset, False, input_scale, limit, device)
    worse = evaluate_dataset(model, dataset, True, input_scale, limit, device)
    console.summary("VALIDATION SUMMARY", [
        ("Images", clean.n_images),
        ("Detection Score (clean / deteriorated)", f"{clean.detection_score:.3f} / {worse.detection_score:.3f}"),
        ("ID Matching Score (clean / deteriorated)", f"{clean.id_matching_score:.3f} / {worse.id_matching_score:.3f}"),
        ("Average False Alarm (clean / deteriorated)",
         f"{clean.average_false_alarm:.3f} / {worse.average_false_alarm:.3f}"),
    ])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "validation_report.json"), "w", encoding="utf-8") as f:
            json.dump({"timestamp": datetime.now().isoformat(),
                       "clean": clean.to_dict(), "deteriorated": worse.to_dict()}, f, indent=2)
    return clean, worse


# ============================================================================
# HEXAGON BOARD
# ============================================================================

@dataclass
class HexBoardSpec:
    """
    Unit-square board carrying six identical patches on the vertices of an
    equilateral hexagon centered on the board.
    """
    type_id: int = 0
    patch_radius: float = 0.08
    hex_radius: float = 0.34
    area_fraction: float = 0.16
    black_level: int = 0
    white_level: int = 255

    def validate(self):
        if self.type_id not in range(N_TYPES):
            raise InvalidArgumentError(f"type_id {self.type_id} not in 0..{N_TYPES - 1}")
        if self.hex_radius + self.patch_radius > 0.5:
            raise InvalidArgumentError("hexagon plus patch radius must fit inside the unit board")
        if self.hex_radius < 2 * self.patch_radius:
            raise InvalidArgumentError("adjacent patches would overlap")
        if not 0.0 < self.area_fraction <= 1.0:
            raise InvalidArgumentError("area_fraction must be in (0, 1]")
        return self

    def vertices(self):
        """Six vertices in board units, counter-clockwise from +x"""
        angles = np.arange(6) * (math.pi / 3.0)
        return np.stack([0.5 + self.hex_radius * np.cos(angles),
                         0.5 + self.hex_radius * np.sin(angles)], axis=1)


def side_lengths(points):
    """Adjacent distances of six points taken in angular order around their centroid"""
    pts = np.asarray(points, dtype=np.float64)
    center = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0]))
    ring = pts[order]
    return np.linalg.norm(ring - np.roll(ring, -1, axis=0), axis=1)


def _rotation_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def board_homography(rng, image_size, area_fraction, pitch_deg=0.0, max_attempts=100):
    """
    Pinhole projection of the unit board into the image.

    The camera has focal length equal to the image width and its principal
    point at the image center. The board distance makes its fronto-parallel
    area `area_fraction` of the image; it is then spun about its normal by a
    random angle, pitched by `pitch_deg` and placed at a random position
    with all four corners inside the image.
    """
    width, height = image_size
    side = math.sqrt(area_fraction * width * height)
    focal = float(width)
    k = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    k_inv = np.linalg.inv(k)
    depth = focal / side
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

    for _ in range(max_attempts):
        r = _rotation_x(math.radians(pitch_deg)) @ _rotation_z(rng.uniform(0.0, 2.0 * math.pi))
        margin = min(0.75 * side, min(width, height) / 2.0)
        cx = rng.uniform(margin, width - margin)
        cy = rng.uniform(margin, height - margin)
        t = depth * (k_inv @ np.array([cx, cy, 1.0]))
        m = k @ np.column_stack([r[:, 0], r[:, 1], t - 0.5 * r[:, 0] - 0.5 * r[:, 1]])
        h = Homography(m)
        try:
            projected = apply_homography_points(h, corners)
        except ArithmeticError:
            continue
        if np.all(projected[:, 0] >= 0) and np.all(projected[:, 0] <= width - 1) \
                and np.all(projected[:, 1] >= 0) and np.all(projected[:, 1] <= height - 1):
            return h
    raise ConstraintInfeasibleError(
        f"board at {100 * area_fraction:.2f}% area and {pitch_deg} deg pitch does not fit {width}x{height}")


def _unit_to_raster(offset, unit_per_px):
    """Raster pixel -> board unit coordinates"""
    return Homography(np.array([[unit_per_px, 0.0, offset[0]],
                                [0.0, unit_per_px, offset[1]],
                                [0.0, 0.0, 1.0]]))


def render_board_scene(background, board, h_board):
    """
    Composite the white board and its six patches through h_board.

    Returns:
    --------
    tuple : (image, list of KeypointInstance)
    """
    canvas = background.copy()
    step = 1.0 / BOARD_RASTER_PX
    blank = np.full((BOARD_RASTER_PX, BOARD_RASTER_PX), board.white_level, dtype=np.uint8)
    composite_warped(h_board @ _unit_to_raster((0.5 * step, 0.5 * step), step), blank,
                     np.ones(blank.shape, dtype=np.float32), canvas, inplace=True)

    spec = canonical_designs()[board.type_id]
    raster = render_patch(spec, SOURCE_PATCH_RADIUS, board.black_level, board.white_level)
    alpha = disk_alpha(SOURCE_PATCH_RADIUS)
    unit_per_px = board.patch_radius / SOURCE_PATCH_RADIUS
    instances = []
    for vx, vy in board.vertices():
        offset = (vx - SOURCE_PATCH_RADIUS * unit_per_px, vy - SOURCE_PATCH_RADIUS * unit_per_px)
        h_patch = h_board @ _unit_to_raster(offset, unit_per_px)
        composite_warped(h_patch, raster.pixels, alpha, canvas, inplace=True)
        x, y = apply_homography(h_patch, raster.center)
        radius = warped_ellipse(h_patch, raster.center, SOURCE_PATCH_RADIUS).mean_radius
        instances.append(KeypointInstance(x=x, y=y, type_id=board.type_id, radius_px=radius,
                                          homography=h_patch, black_level=board.black_level,
                                          white_level=board.white_level,
                                          source_radius_px=SOURCE_PATCH_RADIUS))
    return canvas, instances


@dataclass
class HexagonVerdict:
    vertices: np.ndarray
    hits: Dict[int, int]
    false_positives: List[int]
    misses: List[int]


def hexagon_consistency_check(detections, board, h, epsilon_fraction=EPSILON_FRACTION):
    """
    Classify detections against the six projected board vertices.

    Returns:
    --------
    HexagonVerdict
        hits maps vertex index to detection index; every other detection is
        a false positive and every vertex without a hit is a miss.
    """
    unit_per_px = board.patch_radius / SOURCE_PATCH_RADIUS
    gts = []
    for vx, vy in board.vertices():
        offset = (vx - SOURCE_PATCH_RADIUS * unit_per_px, vy - SOURCE_PATCH_RADIUS * unit_per_px)
        h_patch = h @ _unit_to_raster(offset, unit_per_px)
        center = (float(SOURCE_PATCH_RADIUS), float(SOURCE_PATCH_RADIUS))
        x, y = apply_homography(h_patch, center)
        radius = warped_ellipse(h_patch, center, SOURCE_PATCH_RADIUS).mean_radius
        gts.append(KeypointInstance(x=x, y=y, type_id=board.type_id, radius_px=radius, homography=h_patch))
    m = match_detections(detections, gts, epsilon_fraction)
    return HexagonVerdict(vertices=np.array([[g.x, g.y] for g in gts]),
                          hits={j: i for i, j, _ in m.pairs},
                          false_positives=list(m.unmatched_predictions),
                          misses=list(m.unmatched_ground_truth))


# ============================================================================
# SWEEPS
# ============================================================================

@dataclass
class SweepSpec:
    """
    One experiment axis. Scale levels are board area in percent of the
    image, pitch levels degrees, blur levels kernel sizes, noise levels
    sigma, dimming levels k of f = 0.6 ** (k / dimming_level_divisor).
    """
    axis: str = "scale"
    levels: Optional[List[float]] = None
    images_per_level: int = 500
    image_size: Tuple[int, int] = (1624, 1240)
    types: Tuple[int, ...] = (0, 1, 2, 3)
    board: HexBoardSpec = field(default_factory=HexBoardSpec)
    blur_kind: str = "box_blur"
    dimming_level_divisor: float = 1.0
    backgrounds: str = "procedural"
    input_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.axis = AXIS_ALIASES.get(self.axis, self.axis)
        if self.levels is None and self.axis in DEFAULT_LEVELS:
            self.levels = list(DEFAULT_LEVELS[self.axis])

    def validate(self):
        if self.axis not in AXES:
            raise InvalidArgumentError(f"axis must be one of {AXES}, got '{self.axis}'")
        if not self.levels:
            raise InvalidArgumentError("levels must be nonempty")
        if self.images_per_level <= 0:
            raise InvalidArgumentError("images_per_level must be positive")
        for level in self.levels:
            if self.axis == "scale" and not 0 < level <= 100:
                raise InvalidArgumentError(f"scale level {level}% outside (0, 100]")
            if self.axis == "pitch" and not 0 <= level < 90:
                raise InvalidArgumentError(f"pitch level {level} outside [0, 90)")
            if self.axis == "blur" and (int(level) != level or level < 3 or int(level) % 2 == 0):
                raise InvalidArgumentError(f"blur level {level} must be an odd integer >= 3")
            if self.axis in ("dimming", "gaussian_noise") and level < 0:
                raise InvalidArgumentError(f"{self.axis} level {level} must be >= 0")
        if self.blur_kind not in ("box_blur", "motion_blur"):
            raise InvalidArgumentError("blur_kind must be box_blur or motion_blur")
        if self.dimming_level_divisor <= 0:
            raise InvalidArgumentError("dimming_level_divisor must be positive")
        self.board.validate()
        return self

    def level_label(self, level):
        value = f"{level:g}"
        return f"{value}%" if self.axis == "scale" else value


def level_degradations(spec, level, rng):
    if spec.axis == "blur":
        return [DegradationSpec(spec.blur_kind, kernel_px=int(level), seed=int(rng.integers(0, 2 ** 31 - 1)))]
    if spec.axis == "dimming":
        return [DegradationSpec("dimming", k=float(level) / spec.dimming_level_divisor)]
    if spec.axis == "gaussian_noise":
        return [DegradationSpec("gaussian_noise", sigma=float(level), seed=int(rng.integers(0, 2 ** 31 - 1)))]
    return []


def board_scene(spec, level_index, type_id, index, backgrounds=None):
    """
    Deterministic sweep image `index` for one level and patch type.

    Returns:
    --------
    tuple : (image, list of KeypointInstance, board Homography)
    """
    level = spec.levels[level_index]
    stream = SWEEP_STREAM_BASE + AXES.index(spec.axis) * 1000 + level_index * N_TYPES + type_id
    rng = child_rng(spec.seed, index, stream)
    backgrounds = backgrounds or open_backgrounds(spec.backgrounds, spec.image_size, seed=spec.seed)
    background = backgrounds.load(int(rng.integers(0, len(backgrounds))))
    board = HexBoardSpec(**{**asdict(spec.board), "type_id": type_id})
    area = level / 100.0 if spec.axis == "scale" else board.area_fraction
    pitch = level if spec.axis == "pitch" else 0.0
    h = board_homography(rng, spec.image_size, area, pitch)
    image, instances = render_board_scene(background, board, h)
    return apply_all(level_degradations(spec, level, rng), image), instances, h


def run_sweep(model, spec, out_dir=None, device=None):
    """
    Evaluate every level of one axis on synthetic hexagon boards.

    Each level is scored images_per_level times per patch type; the pooled
    report carries the per-type reports in `per_type`.

    Returns:
    --------
    list of EvalReport
        One per level, in level order.
    """
    spec.validate()
    predictor = _as_predictor(model, spec.input_scale, device)
    backgrounds = open_backgrounds(spec.backgrounds, spec.image_size, seed=spec.seed)
    console.section(f"SWEEP: {spec.axis.upper()}")
    console.step(f"  Levels: {[spec.level_label(v) for v in spec.levels]}")
    console.step(f"  {spec.images_per_level} images x {len(spec.types)} types per level, "
                 f"{spec.image_size[0]}x{spec.image_size[1]}")

    reports = []
    for level_index, level in enumerate(spec.levels):
        console.subsection(f"Level {spec.level_label(level)}")
        condition = {"axis": spec.axis, "level": level, "input_scale": spec.input_scale}
        pooled = ScoreAccumulator(condition)
        per_type = {}
        for type_id in spec.types:
            acc = ScoreAccumulator({**condition, "type_id": type_id})
            for index in tqdm(range(spec.images_per_level), desc=f"{spec.level_label(level)} type {type_id}",
                              leave=False, disable=not console.is_verbose()):
                image, instances, _ = board_scene(spec, level_index, type_id, index, backgrounds)
                preds = predictor.predict(image)
                acc.add(preds, instances)
                pooled.add(preds, instances)
            per_type[str(type_id)] = acc.report().to_dict()
        report = pooled.report()
        report.per_type = per_type
        reports.append(report)
        console.ok(f"{spec.level_label(level)}: detection {report.detection_score:.3f}, "
                   f"id {report.id_matching_score:.3f}, false alarm {report.average_false_alarm:.3f}")

    if out_dir:
        write_sweep_reports(reports, spec, out_dir)
    return reports


def sweep_table(reports, spec):
    """Metric rows by level columns"""
    columns = [spec.level_label(r.condition["level"]) for r in reports]
    data = {col: [getattr(r, attr) for _, attr in METRIC_ROWS] for col, r in zip(columns, reports)}
    frame = pd.DataFrame(data, index=[name for name, _ in METRIC_ROWS], columns=columns)
    frame.index.name = "Identification Evaluation Metrics"
    return frame


def per_type_table(reports, spec):
    rows = []
    for r in reports:
        for type_id, sub in r.per_type.items():
            for name, attr in METRIC_ROWS:
                rows.append({"type_id": int(type_id), "metric": name,
                             "level": spec.level_label(r.condition["level"]), "value": sub[attr]})
    if not rows:
        return pd.DataFrame()
    frame = pd.DataFrame(rows).pivot_table(index=["type_id", "metric"], columns="level",
                                           values="value", sort=False)
    return frame[[spec.level_label(r.condition["level"]) for r in reports]]


def write_sweep_reports(reports, spec, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"sweep_{spec.axis}")
    spec_record = asdict(spec)
    with open(stem + ".json", "w", encoding="utf-8") as f:
        json.dump({"timestamp": datetime.now().isoformat(), "spec": spec_record,
                   "reports": [r.to_dict() for r in reports]}, f, indent=2)
    sweep_table(reports, spec).to_csv(stem + ".csv")
    per_type_table(reports, spec).to_csv(stem + "_by_type.csv")
    console.step(f"Results saved to: {stem}.json / .csv / _by_type.csv")
    return stem
