# -*- coding: utf-8 -*-
"""
Synthetic dataset generation
Keypoint patches are warped onto background images, the result is degraded,
and every image gets an annotation plus 8x8-cell supervision targets.
"""
import glob
import json
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from multiprocessing import Pool
from typing import List, Optional, Tuple

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from . import console
from .degradations import AugmentRanges, DegradationSpec, apply_all, random_stack, training_augmentation_stack
from .errors import (
    AnnotationInconsistentError,
    EmptyCorpusError,
    InvalidArgumentError,
    RecordCorruptError,
    ShapeError,
    UnsupportedFormatError,
)
from .geometry import Homography, WarpConstraints, apply_homography, sample_patch_homography, warp_raster_onto, warped_ellipse
from .patch_designs import BLACK_RANGE, MIN_RADIUS_PX, WHITE_RANGE, canonical_designs, render_patch

CELL = 8
DUSTBIN = CELL * CELL
BACKGROUND_ID = 4
N_TYPES = 4
MANIFEST_VERSION = 1
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".JPEG", ".JPG", ".PNG")
SYNTH_KINDS = ("motion_blur", "brightness", "shadow", "rain")

# Seed streams keep training, validation and augmentation draws disjoint
TRAIN_STREAM = 0
VALIDATION_STREAM = 1
AUGMENT_STREAM_BASE = 1000


def child_rng(master_seed, index, stream=TRAIN_STREAM):
    """Generator fully determined by (master_seed, stream, index)"""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(stream), int(index)]))


# ============================================================================
# CONFIGURATION AND RECORDS
# ============================================================================

@dataclass
class SynthConfig:
    """Dataset generation parameters (defaults follow the training recipe)"""
    image_size: Tuple[int, int] = (640, 480)
    count: int = 20000
    validation_count: int = 2000
    max_patches: int = 10
    source_radius_px: int = 32
    black_range: Tuple[int, int] = BLACK_RANGE
    white_range: Tuple[int, int] = WHITE_RANGE
    antialias: bool = True
    min_short_axis_px: float = 10.0
    min_axis_ratio: float = 0.2
    max_radius_px: Optional[float] = None
    max_perspective: float = 0.25
    max_placement_retries: int = 100
    backgrounds: str = "procedural"
    degradations: AugmentRanges = field(
        default_factory=lambda: AugmentRanges(probability=0.25, kinds=SYNTH_KINDS))

    def validate(self):
        width, height = self.image_size
        if width % CELL or height % CELL:
            raise ShapeError(f"image_size {self.image_size} must be divisible by {CELL}")
        if not 0 <= self.max_patches <= 10:
            raise InvalidArgumentError("max_patches must be within [0, 10]")
        if not (BLACK_RANGE[0] <= self.black_range[0] <= self.black_range[1] <= BLACK_RANGE[1]):
            raise InvalidArgumentError(f"black_range must lie within {BLACK_RANGE}")
        if not (WHITE_RANGE[0] <= self.white_range[0] <= self.white_range[1] <= WHITE_RANGE[1]):
            raise InvalidArgumentError(f"white_range must lie within {WHITE_RANGE}")
        self.constraints()
        return self

    def constraints(self):
        return WarpConstraints(min_short_axis_px=self.min_short_axis_px,
                               min_axis_ratio=self.min_axis_ratio,
                               max_patches_per_image=self.max_patches,
                               image_size=tuple(self.image_size),
                               max_radius_px=self.max_radius_px,
                               max_perspective=self.max_perspective).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class KeypointInstance:
    """Ground truth of one placed patch; (x, y) is the warped shared center"""
    x: float
    y: float
    type_id: int
    radius_px: float
    homography: Homography
    black_level: int = 0
    white_level: int = 255
    source_radius_px: int = 32

    def to_dict(self):
        return {
            "x": self.x, "y": self.y, "type_id": self.type_id, "radius_px": self.radius_px,
            "homography": self.homography.to_list(),
            "black_level": self.black_level, "white_level": self.white_level,
            "source_radius_px": self.source_radius_px,
        }

    @classmethod
    def from_dict(cls, record):
        record = dict(record)
        record["homography"] = Homography.from_list(record["homography"])
        return cls(**record)


@dataclass
class SampleAnnotation:
    """Everything needed to replay one synthesized image bit-exactly"""
    image_path: str
    image_size: Tuple[int, int]
    instances: List[KeypointInstance]
    degradations: List[DegradationSpec]
    background_source: str
    background_index: int = 0
    seed: int = 0
    index: int = 0
    stream: int = TRAIN_STREAM

    def __post_init__(self):
        if len(self.instances) > 10:
            raise AnnotationInconsistentError(f"{len(self.instances)} instances exceed the limit of 10")

    def to_dict(self):
        return {
            "image_path": self.image_path,
            "image_size": list(self.image_size),
            "instances": [inst.to_dict() for inst in self.instances],
            "degradations": [d.to_dict() for d in self.degradations],
            "background_source": self.background_source,
            "background_index": self.background_index,
            "seed": self.seed,
            "index": self.index,
            "stream": self.stream,
        }

    @classmethod
    def from_dict(cls, record):
        return cls(image_path=record["image_path"],
                   image_size=tuple(record["image_size"]),
                   instances=[KeypointInstance.from_dict(r) for r in record["instances"]],
                   degradations=[DegradationSpec.from_dict(r) for r in record["degradations"]],
                   background_source=record["background_source"],
                   background_index=int(record.get("background_index", 0)),
                   seed=int(record.get("seed", 0)),
                   index=int(record.get("index", 0)),
                   stream=int(record.get("stream", TRAIN_STREAM)))


@dataclass
class CellTargets:
    """Per-cell classes: detector 0..63 position or 64 dustbin, id 0..3 type or 4 background"""
    detector: np.ndarray
    id: np.ndarray


# ============================================================================
# BACKGROUND CORPORA
# ============================================================================

def fit_background(img, image_size):
    """Aspect-fill resize and center crop to (width, height)"""
    width, height = image_size
    src_h, src_w = img.shape[:2]
    scale = max(width / src_w, height / src_h)
    new_w = max(width, int(math.ceil(src_w * scale)))
    new_h = max(height, int(math.ceil(src_h * scale)))
    interp = cv2.INTER_AREA if scale < 1 else cv2.INTER_CUBIC
    resized = cv2.resize(img, (new_w, new_h), interpolation=interp)
    x0 = (new_w - width) // 2
    y0 = (new_h - height) // 2
    return np.ascontiguousarray(resized[y0:y0 + height, x0:x0 + width])


class ImageFolderBackgrounds:
    """Background corpus read from a directory of images (e.g. ImageNet)"""

    def __init__(self, root, image_size=(640, 480)):
        self.root = root
        self.image_size = tuple(image_size)
        if not os.path.isdir(root):
            raise EmptyCorpusError(f"background directory not found: {root}")
        files = []
        for ext in IMAGE_EXTENSIONS:
            files.extend(glob.glob(os.path.join(root, "**", f"*{ext}"), recursive=True))
        self.files = sorted(set(files))
        if not self.files:
            raise EmptyCorpusError(f"no images found under {root}")

    def __len__(self):
        return len(self.files)

    def identifier(self, index):
        return os.path.relpath(self.files[index], self.root)

    def load(self, index):
        img = cv2.imread(self.files[index], cv2.IMREAD_COLOR)
        if img is None:
            raise EmptyCorpusError(f"unreadable background image: {self.files[index]}")
        return fit_background(cv2.cvtColor(img, cv2.COLOR_BGR2RGB), self.image_size)


class ProceduralBackgrounds:
    """Seeded clutter textures; an offline stand-in for a photo corpus"""

    def __init__(self, image_size=(640, 480), size=10000, seed=0):
        if size <= 0:
            raise EmptyCorpusError("procedural corpus size must be positive")
        self.image_size = tuple(image_size)
        self.size = size
        self.seed = seed

    def __len__(self):
        return self.size

    def identifier(self, index):
        return f"procedural:{index}"

    def load(self, index):
        width, height = self.image_size
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 7, int(index)]))
        coarse = rng.uniform(0, 255, size=(int(rng.integers(3, 9)), int(rng.integers(3, 9)), 3))
        img = cv2.resize(coarse.astype(np.float32), (width, height), interpolation=cv2.INTER_CUBIC)
        img = np.clip(img, 0, 255).astype(np.uint8)
        for _ in range(int(rng.integers(5, 40))):
            color = tuple(int(c) for c in rng.integers(0, 256, size=3))
            shape = rng.integers(0, 3)
            p1 = (int(rng.integers(0, width)), int(rng.integers(0, height)))
            if shape == 0:
                p2 = (int(rng.integers(0, width)), int(rng.integers(0, height)))
                cv2.rectangle(img, p1, p2, color, -1 if rng.random() < 0.5 else 2)
            elif shape == 1:
                p2 = (int(rng.integers(0, width)), int(rng.integers(0, height)))
                cv2.line(img, p1, p2, color, int(rng.integers(1, 6)))
            else:
                cv2.ellipse(img, p1, (int(rng.integers(3, 60)), int(rng.integers(3, 60))),
                            float(rng.uniform(0, 180)), 0, 360, color, -1 if rng.random() < 0.5 else 2)
        grain = rng.normal(0.0, rng.uniform(0.0, 8.0), size=img.shape)
        return np.clip(np.rint(img + grain), 0, 255).astype(np.uint8)


def open_backgrounds(source, image_size=(640, 480), seed=0):
    """'procedural' or a directory of images"""
    if source in (None, "", "procedural"):
        return ProceduralBackgrounds(image_size, seed=seed)
    return ImageFolderBackgrounds(source, image_size)


# ============================================================================
# SYNTHESIS
# ============================================================================

def _overlaps(center, ellipse, placed):
    for other_center, other_ellipse in placed:
        if other_ellipse.contains(center) or ellipse.contains(other_center):
            return True
    return False


def compose_scene(background, instances, antialias=True):
    """Render and warp every instance onto a copy of the background, in order"""
    designs = canonical_designs()
    canvas = background.copy()
    for inst in instances:
        raster = render_patch(designs[inst.type_id], inst.source_radius_px,
                              inst.black_level, inst.white_level, antialias=antialias)
        warp_raster_onto(inst.homography, raster, canvas, inplace=True)
    return canvas


def synthesize_sample(rng, backgrounds, cfg, index=0, master_seed=0, stream=TRAIN_STREAM):
    """
    Compose one labeled training image.

    Parameters:
    -----------
    rng : numpy.random.Generator
        Source of every random draw for this image.
    backgrounds : ImageFolderBackgrounds or ProceduralBackgrounds
    cfg : SynthConfig

    Returns:
    --------
    tuple : (image, SampleAnnotation)
        RGB uint8 image of cfg.image_size and its annotation.
    """
    if len(backgrounds) == 0:
        raise EmptyCorpusError("background corpus is empty")
    constraints = cfg.constraints()
    radius = int(cfg.source_radius_px)
    center = (float(radius), float(radius))

    background_index = int(rng.integers(0, len(backgrounds)))
    background = backgrounds.load(background_index)
    n_patches = int(rng.integers(0, cfg.max_patches + 1))

    instances = []
    placed = []
    for _ in range(n_patches):
        type_id = int(rng.integers(0, N_TYPES))
        black = int(rng.integers(cfg.black_range[0], cfg.black_range[1] + 1))
        white = int(rng.integers(cfg.white_range[0], cfg.white_range[1] + 1))
        for _ in range(cfg.max_placement_retries):
            h = sample_patch_homography(rng, constraints, radius)
            keypoint = apply_homography(h, center)
            ellipse = warped_ellipse(h, center, radius)
            if _overlaps(keypoint, ellipse, placed):
                continue
            placed.append((keypoint, ellipse))
            instances.append(KeypointInstance(x=keypoint[0], y=keypoint[1], type_id=type_id,
                                              radius_px=ellipse.mean_radius, homography=h,
                                              black_level=black, white_level=white,
                                              source_radius_px=radius))
            break

    composite = compose_scene(background, instances, cfg.antialias)
    degradations = random_stack(rng, cfg.degradations)
    image = apply_all(degradations, composite)
    annotation = SampleAnnotation(image_path=f"images/{index:08d}.png",
                                  image_size=tuple(cfg.image_size),
                                  instances=instances, degradations=degradations,
                                  background_source=backgrounds.identifier(background_index),
                                  background_index=background_index,
                                  seed=int(master_seed), index=int(index), stream=int(stream))
    return image, annotation


def generate_sample(master_seed, index, backgrounds, cfg, stream=TRAIN_STREAM):
    """Sample `index` of the stream, replayable from (master_seed, stream, index)"""
    return synthesize_sample(child_rng(master_seed, index, stream), backgrounds, cfg,
                             index=index, master_seed=master_seed, stream=stream)


def replay_sample(annotation, backgrounds, cfg):
    """
    Rebuild an image from its annotation.

    Returns:
    --------
    tuple : (composite, image)
        The pre-degradation composite and the final degraded image.
    """
    background = backgrounds.load(annotation.background_index)
    composite = compose_scene(background, annotation.instances, cfg.antialias)
    return composite, apply_all(annotation.degradations, composite)


# ============================================================================
# CELL TARGETS
# ============================================================================

def _grid_shape(image_size):
    width, height = image_size
    if width % CELL or height % CELL:
        raise ShapeError(f"image size {image_size} is not divisible by {CELL}")
    return height // CELL, width // CELL


def _pixel_of(inst, image_size):
    width, height = image_size
    px = int(math.floor(inst.x + 0.5))
    py = int(math.floor(inst.y + 0.5))
    if not (0 <= px < width and 0 <= py < height):
        raise AnnotationInconsistentError(
            f"keypoint ({inst.x:.2f}, {inst.y:.2f}) rounds outside the {width}x{height} image")
    return px, py


def surviving_instances(ann):
    """
    One instance per cell: largest radius_px wins, then lowest instance index.

    Returns:
    --------
    dict : (cell_row, cell_col) -> (instance_index, px, py)
    """
    order = sorted(range(len(ann.instances)), key=lambda i: (-ann.instances[i].radius_px, i))
    survivors = {}
    for i in order:
        px, py = _pixel_of(ann.instances[i], ann.image_size)
        cell = (py // CELL, px // CELL)
        if cell not in survivors:
            survivors[cell] = (i, px, py)
    return survivors


def make_detector_target(ann):
    """(H/8, W/8) grid: within-cell pixel index row*8 + col, or 64 for empty cells"""
    grid = np.full(_grid_shape(ann.image_size), DUSTBIN, dtype=np.int64)
    for (row, col), (_, px, py) in surviving_instances(ann).items():
        grid[row, col] = (py % CELL) * CELL + (px % CELL)
    return grid


def make_id_target(ann):
    """(H/8, W/8) grid: patch type of the surviving keypoint, or 4 for background"""
    grid = np.full(_grid_shape(ann.image_size), BACKGROUND_ID, dtype=np.int64)
    for (row, col), (i, _, _) in surviving_instances(ann).items():
        grid[row, col] = ann.instances[i].type_id
    return grid


def make_cell_targets(ann):
    return CellTargets(detector=make_detector_target(ann), id=make_id_target(ann))


def one_hot_id(id_grid):
    """5-channel indicator form of an id grid, channels first"""
    return np.moveaxis(np.eye(BACKGROUND_ID + 1, dtype=np.float32)[id_grid], -1, 0)


def decode_cell_targets(targets):
    """Recover (x, y, type_id) of every non-dustbin cell"""
    points = []
    rows, cols = np.nonzero(targets.detector != DUSTBIN)
    for row, col in zip(rows, cols):
        position = int(targets.detector[row, col])
        x = col * CELL + position % CELL
        y = row * CELL + position // CELL
        points.append((float(x), float(y), int(targets.id[row, col])))
    return points


# ============================================================================
# ON-DISK DATASETS
# ============================================================================

def _image_path(root, index):
    return os.path.join(root, "images", f"{index:08d}.png")


def _label_path(root, index):
    return os.path.join(root, "labels", f"{index:08d}.json")


class DatasetWriter:
    """Single writer of a dataset root; indices already on disk can be skipped"""

    def __init__(self, root, cfg=None, seed=0, stream=TRAIN_STREAM):
        self.root = root
        self.cfg = cfg
        self.seed = seed
        self.stream = stream
        os.makedirs(os.path.join(root, "images"), exist_ok=True)
        os.makedirs(os.path.join(root, "labels"), exist_ok=True)

    def exists(self, index):
        return os.path.exists(_image_path(self.root, index)) and os.path.exists(_label_path(self.root, index))

    def write(self, index, image, annotation):
        annotation.image_path = f"images/{index:08d}.png"
        bgr = cv2.cvtColor(image, cv2.COLOR_RGB2BGR) if image.ndim == 3 else image
        if not cv2.imwrite(_image_path(self.root, index), bgr):
            raise OSError(f"could not write {_image_path(self.root, index)}")
        tmp = _label_path(self.root, index) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(annotation.to_dict(), f)
        os.replace(tmp, _label_path(self.root, index))

    def finalize(self, count):
        manifest = {
            "format": "keypatch-dataset",
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "stream": self.stream,
            "count": int(count),
            "config": self.cfg.to_dict() if self.cfg is not None else None,
            "created": datetime.now().isoformat(),
        }
        with open(os.path.join(self.root, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)
        return manifest


def write_dataset(samples, root, cfg=None, seed=0, stream=TRAIN_STREAM):
    """Write an iterable of (image, annotation) pairs; returns the sample count"""
    writer = DatasetWriter(root, cfg, seed, stream)
    count = 0
    for index, (image, annotation) in enumerate(samples):
        writer.write(index, image, annotation)
        count += 1
    writer.finalize(count)
    return count


def read_manifest(root):
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest.json not found in {root}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise UnsupportedFormatError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != "keypatch-dataset" or manifest.get("version") != MANIFEST_VERSION:
        raise UnsupportedFormatError(
            f"dataset format {manifest.get('format')} v{manifest.get('version')} unsupported "
            f"(expected keypatch-dataset v{MANIFEST_VERSION})")
    return manifest


def _grayscale_tensor(image):
    gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY) if image.ndim == 3 else image
    return torch.from_numpy(gray.astype(np.float32) / 255.0)[None]


class SyntheticDataset(Dataset):
    """
    Reader over a dataset root; safe for concurrent readers.

    Items are dicts with a 1xHxW luminance tensor in [0, 1] and the two cell
    target grids. Setting `epoch` (1-based) at or beyond `augment_from_epoch`
    applies the training augmentation stack, seeded per (epoch, index).
    """

    def __init__(self, root, augment_ranges=None):
        self.root = root
        self.manifest = read_manifest(root)
        self.epoch = 0
        self.augment_from_epoch = None
        self.augment_ranges = augment_ranges

    def __len__(self):
        return int(self.manifest["count"])

    def annotation(self, index):
        try:
            with open(_label_path(self.root, index), "r", encoding="utf-8") as f:
                return SampleAnnotation.from_dict(json.load(f))
        except FileNotFoundError:
            raise RecordCorruptError(index, "label file missing")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AnnotationInconsistentError) as exc:
            raise RecordCorruptError(index, str(exc)) from exc

    def image(self, index):
        img = cv2.imread(_image_path(self.root, index), cv2.IMREAD_COLOR)
        if img is None:
            raise RecordCorruptError(index, "image missing or unreadable")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)

    def augmentations(self, index):
        if self.augment_from_epoch is None:
            return []
        rng = child_rng(self.manifest.get("seed", 0), index, AUGMENT_STREAM_BASE + self.epoch)
        return training_augmentation_stack(rng, self.epoch, self.augment_from_epoch, self.augment_ranges)

    def __getitem__(self, index):
        annotation = self.annotation(index)
        image = apply_all(self.augmentations(index), self.image(index))
        targets = make_cell_targets(annotation)
        return {
            "image": _grayscale_tensor(image),
            "detector_target": torch.from_numpy(targets.detector),
            "id_target": torch.from_numpy(targets.id),
            "index": index,
        }


def read_dataset(root, augment_ranges=None):
    return SyntheticDataset(root, augment_ranges)


# ============================================================================
# GENERATION DRIVER
# ============================================================================

def _generate_one(job):
    master_seed, index, cfg, stream, root = job
    backgrounds = open_backgrounds(cfg.backgrounds, cfg.image_size, seed=master_seed)
    image, annotation = generate_sample(master_seed, index, backgrounds, cfg, stream)
    DatasetWriter(root, stream=stream).write(index, image, annotation)
    return index, len(annotation.instances)


def synthesize_dataset(root, cfg, count=None, seed=0, stream=TRAIN_STREAM, workers=1):
    """
    Generate `count` samples into `root`, skipping indices already written.

    Parameters:
    -----------
    root : str
        Dataset root; created if missing.
    cfg : SynthConfig
    count : int, optional
        Defaults to cfg.count (cfg.validation_count for the validation stream).
    seed : int
        Master seed; sample i uses the child seed (seed, stream, i).
    workers : int
        Parallel synthesis processes.

    Returns:
    --------
    dict
        The manifest written.
    """
    cfg.validate()
    if count is None:
        count = cfg.validation_count if stream == VALIDATION_STREAM else cfg.count
    # Fail early on an empty corpus, before any worker starts
    open_backgrounds(cfg.backgrounds, cfg.image_size, seed=seed)
    writer = DatasetWriter(root, cfg, seed, stream)
    pending = [i for i in range(count) if not writer.exists(i)]

    console.section("DATASET SYNTHESIS")
    console.step(f"  Output: {root}")
    console.step(f"  Samples: {count} ({count - len(pending)} already on disk)")
    console.step(f"  Image size: {cfg.image_size[0]}x{cfg.image_size[1]}, seed {seed}, stream {stream}")

    jobs = [(seed, i, cfg, stream, root) for i in pending]
    n_instances = 0
    progress = tqdm(total=len(jobs), desc="Synthesizing", disable=not console.is_verbose())
    if workers > 1 and len(jobs) > 1:
        with Pool(workers) as pool:
            for _, n in pool.imap_unordered(_generate_one, jobs, chunksize=8):
                n_instances += n
                progress.update(1)
    else:
        for job in jobs:
            n_instances += _generate_one(job)[1]
            progress.update(1)
    progress.close()

    manifest = writer.finalize(count)
    console.ok(f"Wrote {len(jobs)} new samples with {n_instances} keypoint patches")
    return manifest


# ============================================================================
# DATASET VALIDATOR
# ============================================================================

class DatasetValidator:
    """Checks a dataset root for consistency between manifest, images and labels"""

    LABEL_TOLERANCE_PX = 1e-6

    def __init__(self, root):
        self.root = root
        self.errors = []
        self.warnings = []
        self.stats = {}

    def validate(self):
        """Run validation; returns True when no errors were found"""
        console.section("DATASET VALIDATOR")
        console.step(f"Dataset root: {self.root}\n")
        try:
            manifest = read_manifest(self.root)
        except (FileNotFoundError, UnsupportedFormatError) as exc:
            self.errors.append(str(exc))
            console.error(str(exc))
            self._save_and_print_summary()
            return False

        count = int(manifest["count"])
        n_images = len(glob.glob(os.path.join(self.root, "images", "*.png")))
        n_labels = len(glob.glob(os.path.join(self.root, "labels", "*.json")))
        self.stats.update({"manifest_count": count, "image_files": n_images, "label_files": n_labels})
        if n_images != count or n_labels != count:
            self.errors.append(f"manifest count {count} != {n_images} images / {n_labels} labels")
            console.error(f"Count mismatch: manifest {count}, images {n_images}, labels {n_labels}")
        else:
            console.ok(f"Manifest count matches {count} images and labels")

        dataset = SyntheticDataset(self.root)
        instance_counts = []
        worst_offset = 0.0
        for index in range(count):
            try:
                ann = dataset.annotation(index)
            except RecordCorruptError as exc:
                self.errors.append(str(exc))
                continue
            instance_counts.append(len(ann.instances))
            for inst in ann.instances:
                center = (float(inst.source_radius_px), float(inst.source_radius_px))
                x, y = apply_homography(inst.homography, center)
                worst_offset = max(worst_offset, math.hypot(x - inst.x, y - inst.y))
                if inst.radius_px < MIN_RADIUS_PX:
                    self.warnings.append(f"record {index}: patch radius {inst.radius_px:.1f} px is very small")

        self.stats["worst_label_offset_px"] = worst_offset
        if worst_offset > self.LABEL_TOLERANCE_PX:
            self.errors.append(f"label/homography disagreement of {worst_offset:.3g} px")
            console.error(f"Label centers disagree with homographies by up to {worst_offset:.3g} px")
        else:
            console.ok("Every stored keypoint equals its warped patch center")
        if instance_counts:
            self.stats["instances_total"] = int(np.sum(instance_counts))
            self.stats["instances_per_image_mean"] = float(np.mean(instance_counts))
            self.stats["instances_per_image_max"] = int(np.max(instance_counts))
            console.ok(f"{self.stats['instances_total']} instances, "
                       f"{self.stats['instances_per_image_mean']:.2f} per image")

        self._save_and_print_summary()
        return len(self.errors) == 0

    def _save_and_print_summary(self):
        results = {
            "timestamp": datetime.now().isoformat(),
            "dataset_root": self.root,
            "statistics": self.stats,
            "errors": self.errors,
            "warnings": self.warnings,
            "summary": {
                "status": "FAIL" if self.errors else ("WARNING" if self.warnings else "PASS"),
                "error_count": len(self.errors),
                "warning_count": len(self.warnings),
            },
        }
        output_file = os.path.join(self.root, "dataset_validation_report.json")
        try:
            with open(output_file, "w", encoding="utf-8") as f:
                json.dump(results, f, indent=2)
            console.step(f"Results saved to: {output_file}")
        except OSError as exc:
            console.warn(f"Could not save results: {exc}")
        console.summary("VALIDATION SUMMARY", [
            ("Status", results["summary"]["status"]),
            ("Errors", results["summary"]["error_count"]),
            ("Warnings", results["summary"]["warning_count"]),
        ])
        for i, message in enumerate(self.errors, 1):
            console.error(f"{i}. {message}")
        return results
