# -*- coding: utf-8 -*-
"""
Keypoint network
A SuperPoint-style shared encoder with a 65-way keypoint location head and a
5-way ID head (four patch types plus background). Each head ends in one
appended 1x1 adaptation layer.
"""
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset_synth import BACKGROUND_ID, CELL, DUSTBIN
from .errors import InvalidArgumentError, ShapeError, UnsupportedFormatError, WeightMismatchError

CHECKPOINT_FORMAT = "keypatch-checkpoint"
CHECKPOINT_VERSION = 1
HEADER_KEY = "__header__"

ENCODER_LAYERS = ("conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b", "conv4a", "conv4b")
HEAD_LAYERS = ("convPa", "convPb", "convDa", "convDb")
ADAPTATION_LAYERS = ("adaptP", "adaptD")


@dataclass
class ModelConfig:
    """Network widths and decoding parameters"""
    encoder_channels: Tuple[int, ...] = (64, 64, 64, 64, 128, 128, 128, 128)
    detector_width: int = 256
    descriptor_width: int = 256
    detect_threshold: float = 0.015
    nms_radius: int = 4
    max_keypoints: int = -1
    background_veto: bool = True

    def validate(self):
        if len(self.encoder_channels) != len(ENCODER_LAYERS):
            raise InvalidArgumentError(f"encoder_channels needs {len(ENCODER_LAYERS)} entries")
        if min(self.encoder_channels) <= 0 or self.detector_width <= 0 or self.descriptor_width <= 0:
            raise InvalidArgumentError("all widths must be positive")
        if not 0.0 < self.detect_threshold < 1.0:
            raise InvalidArgumentError(f"detect_threshold must be in (0, 1), got {self.detect_threshold}")
        if self.nms_radius < 0:
            raise InvalidArgumentError("nms_radius must be >= 0")
        return self

    def to_dict(self):
        record = asdict(self)
        record["encoder_channels"] = list(self.encoder_channels)
        return record

    @classmethod
    def from_dict(cls, record):
        record = dict(record)
        if "encoder_channels" in record:
            record["encoder_channels"] = tuple(record["encoder_channels"])
        return cls(**record)


@dataclass
class NetworkOutput:
    """Raw head outputs, channels first: (B, 65, H/8, W/8) and (B, 5, H/8, W/8)"""
    detector_logits: torch.Tensor
    id_logits: torch.Tensor


@dataclass
class Detection:
    x: float
    y: float
    confidence: float
    type_id: Optional[int] = None
    type_confidence: Optional[float] = None

    def to_dict(self):
        return asdict(self)


def default_device():
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


# ============================================================================
# NETWORK
# ============================================================================

class KeypatchNet(nn.Module):
    """
    Encoder and heads keep the public SuperPoint layer names so reference
    weights load by name; adaptP and adaptD are the appended layers.
    """

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = (cfg or ModelConfig()).validate()
        c1a, c1b, c2a, c2b, c3a, c3b, c4a, c4b = self.cfg.encoder_channels
        self.relu = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

        self.conv1a = nn.Conv2d(1, c1a, kernel_size=3, stride=1, padding=1)
        self.conv1b = nn.Conv2d(c1a, c1b, kernel_size=3, stride=1, padding=1)
        self.conv2a = nn.Conv2d(c1b, c2a, kernel_size=3, stride=1, padding=1)
        self.conv2b = nn.Conv2d(c2a, c2b, kernel_size=3, stride=1, padding=1)
        self.conv3a = nn.Conv2d(c2b, c3a, kernel_size=3, stride=1, padding=1)
        self.conv3b = nn.Conv2d(c3a, c3b, kernel_size=3, stride=1, padding=1)
        self.conv4a = nn.Conv2d(c3b, c4a, kernel_size=3, stride=1, padding=1)
        self.conv4b = nn.Conv2d(c4a, c4b, kernel_size=3, stride=1, padding=1)

        self.convPa = nn.Conv2d(c4b, self.cfg.detector_width, kernel_size=3, stride=1, padding=1)
        self.convPb = nn.Conv2d(self.cfg.detector_width, DUSTBIN + 1, kernel_size=1, stride=1, padding=0)
        self.convDa = nn.Conv2d(c4b, self.cfg.descriptor_width, kernel_size=3, stride=1, padding=1)
        self.convDb = nn.Conv2d(self.cfg.descriptor_width, self.cfg.descriptor_width,
                                kernel_size=1, stride=1, padding=0)

        self.adaptP = nn.Conv2d(DUSTBIN + 1, DUSTBIN + 1, kernel_size=1)
        self.adaptD = nn.Conv2d(self.cfg.descriptor_width, BACKGROUND_ID + 1, kernel_size=1)
        self.reset_adaptation()

    def reset_adaptation(self, generator=None):
        """Identity for the detector path, random for the ID path"""
        with torch.no_grad():
            self.adaptP.weight.copy_(torch.eye(DUSTBIN + 1).view(DUSTBIN + 1, DUSTBIN + 1, 1, 1))
            self.adaptP.bias.zero_()
            bound = 1.0 / np.sqrt(self.cfg.descriptor_width)
            self.adaptD.weight.uniform_(-bound, bound, generator=generator)
            self.adaptD.bias.uniform_(-bound, bound, generator=generator)

    def encode(self, x):
        """Shared backbone feature map at 1/8 resolution"""
        x = self.relu(self.conv1a(x))
        x = self.pool(self.relu(self.conv1b(x)))
        x = self.relu(self.conv2a(x))
        x = self.pool(self.relu(self.conv2b(x)))
        x = self.relu(self.conv3a(x))
        x = self.pool(self.relu(self.conv3b(x)))
        x = self.relu(self.conv4a(x))
        return self.relu(self.conv4b(x))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected a (B, 1, H, W) batch, got {tuple(x.shape)}")
        height, width = x.shape[-2:]
        if height % CELL or width % CELL:
            raise ShapeError(f"input {width}x{height} is not divisible by {CELL}")
        features = self.encode(x)
        detector = self.adaptP(self.convPb(self.relu(self.convPa(features))))
        descriptor = F.normalize(self.convDb(self.relu(self.convDa(features))), p=2, dim=1)
        return NetworkOutput(detector_logits=detector, id_logits=self.adaptD(descriptor))

    def adaptation_parameters(self):
        return [p for name in ADAPTATION_LAYERS for p in getattr(self, name).parameters()]

    def backbone_parameters(self):
        return [p for name in ENCODER_LAYERS + HEAD_LAYERS for p in getattr(self, name).parameters()]


def to_input_tensor(image, device=None):
    """HxW (or HxWx3 RGB) uint8/float image to a (1, 1, H, W) float tensor in [0, 1]"""
    image = np.asarray(image)
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    return tensor.to(device) if device is not None else tensor


def forward(model, image):
    """
    Run the network on one image.

    Parameters:
    -----------
    model : KeypatchNet
    image : numpy.ndarray or torch.Tensor
        Single-channel image scaled to [0, 1], or a (B, 1, H, W) batch.

    Returns:
    --------
    NetworkOutput
    """
    device = next(model.parameters()).device
    x = image if isinstance(image, torch.Tensor) else to_input_tensor(image)
    if x.dim() == 2:
        x = x[None, None]
    with torch.no_grad():
        return model(x.to(device))


# ============================================================================
# DECODING
# ============================================================================

def detector_heatmap(out, batch_index=0):
    """Full-resolution keypoint probability map (H, W) with the dustbin dropped"""
    logits = out.detector_logits[batch_index:batch_index + 1].detach().float()
    prob = F.softmax(logits, dim=1)[:, :DUSTBIN]
    return F.pixel_shuffle(prob, CELL)[0, 0].cpu().numpy()


def nms_points(xs, ys, scores, nms_radius, height, width):
    """
    Greedy suppression by descending score; a kept point suppresses the
    (2r+1) x (2r+1) window around it. Ties keep raster order.
    """
    order = np.argsort(-scores, kind="stable")
    if nms_radius == 0:
        return order
    r = int(nms_radius)
    suppressed = np.zeros((height + 2 * r, width + 2 * r), dtype=bool)
    keep = []
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if suppressed[y + r, x + r]:
            continue
        keep.append(i)
        suppressed[y:y + 2 * r + 1, x:x + 2 * r + 1] = True
    return np.asarray(keep, dtype=np.int64)


def decode_keypoints(out, threshold=0.015, nms_radius=4, max_keypoints=-1, batch_index=0):
    """Thresholded, NMS-filtered detections without type fields"""
    heatmap = detector_heatmap(out, batch_index)
    ys, xs = np.nonzero(heatmap >= threshold)
    if len(xs) == 0:
        return []
    scores = heatmap[ys, xs]
    keep = nms_points(xs, ys, scores, nms_radius, *heatmap.shape)
    if max_keypoints > 0:
        keep = keep[:max_keypoints]
    return [Detection(x=float(xs[i]), y=float(ys[i]), confidence=float(scores[i])) for i in keep]


def decode_ids(out, detections, batch_index=0, background_veto=True):
    """Attach the cell's ID class to each detection; background cells are dropped"""
    prob = F.softmax(out.id_logits[batch_index].detach().float(), dim=0).cpu().numpy()
    typed = []
    for det in detections:
        cell = prob[:, int(det.y) // CELL, int(det.x) // CELL]
        best = int(np.argmax(cell))
        if best == BACKGROUND_ID:
            if background_veto:
                continue
            best = int(np.argmax(cell[:BACKGROUND_ID]))
        typed.append(Detection(x=det.x, y=det.y, confidence=det.confidence,
                               type_id=best, type_confidence=float(cell[best])))
    return typed


def ideal_logits(targets, magnitude=10.0):
    """NetworkOutput with +magnitude at each target class and -magnitude elsewhere"""
    det = torch.as_tensor(np.asarray(targets.detector))
    ids = torch.as_tensor(np.asarray(targets.id))
    det_logits = F.one_hot(det, DUSTBIN + 1).permute(2, 0, 1).float() * 2 * magnitude - magnitude
    id_logits = F.one_hot(ids, BACKGROUND_ID + 1).permute(2, 0, 1).float() * 2 * magnitude - magnitude
    return NetworkOutput(detector_logits=det_logits[None], id_logits=id_logits[None])


# ============================================================================
# WEIGHTS
# ============================================================================

def _read_state(source):
    if source.endswith(".npz"):
        return {k: torch.from_numpy(v) for k, v in _open_archive(source).items() if k != HEADER_KEY}
    return torch.load(source, map_location="cpu", weights_only=True)


def load_pretrained(model, source, strict=True, generator=None):
    """
    Load reference SuperPoint encoder and head weights by their public names.

    The adaptation layers are re-initialized. In strict mode every encoder
    and head tensor must be present with a matching shape.
    """
    if not os.path.exists(source):
        raise FileNotFoundError(f"pretrained weights not found: {source}")
    try:
        state = _read_state(source)
    except (RuntimeError, OSError, zipfile.BadZipFile, ValueError, EOFError) as exc:
        raise WeightMismatchError(f"cannot read pretrained weights {source}: {exc}") from exc
    state = {k[7:] if k.startswith("module.") else k: v for k, v in state.items()}

    own = model.state_dict()
    wanted = [k for k in own if k.split(".")[0] in ENCODER_LAYERS + HEAD_LAYERS]
    missing = [k for k in wanted if k not in state]
    if strict and missing:
        raise WeightMismatchError(f"pretrained weights lack {len(missing)} tensors, e.g. {missing[:3]}")
    update = {}
    for key in wanted:
        if key not in state:
            continue
        if tuple(state[key].shape) != tuple(own[key].shape):
            raise WeightMismatchError(
                f"{key}: shape {tuple(state[key].shape)} != expected {tuple(own[key].shape)}")
        update[key] = state[key].to(own[key].dtype)
    model.load_state_dict(update, strict=False)
    model.reset_adaptation(generator)
    return model


def save_checkpoint(model, path, epoch=0, seed=0, extra=None):
    """Single archive: JSON header plus little-endian float32 weight blobs"""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "epoch": int(epoch),
        "seed": int(seed),
    }
    if extra:
        header.update(extra)
    blobs = {k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
    blobs[HEADER_KEY] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    buffer = io.BytesIO()
    np.savez(buffer, **blobs)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buffer.getvalue())
    os.replace(tmp, path)
    return path


def _open_archive(path):
    try:
        with np.load(path, allow_pickle=False) as archive:
            return {k: archive[k] for k in archive.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise WeightMismatchError(f"checkpoint {path} is truncated or unreadable: {exc}") from exc


def read_checkpoint_header(path):
    blobs = _open_archive(path)
    if HEADER_KEY not in blobs:
        raise WeightMismatchError(f"checkpoint {path} has no header")
    header = json.loads(blobs[HEADER_KEY].tobytes().decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedFormatError(
            f"checkpoint format {header.get('format')} v{header.get('version')} unsupported")
    return header, blobs


def load_checkpoint(path, strict=True, device=None):
    """
    Rebuild a model from a checkpoint.

    Returns:
    --------
    tuple : (KeypatchNet, header dict)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, blobs = read_checkpoint_header(path)
    model = KeypatchNet(ModelConfig.from_dict(header["model_config"]))
    own = model.state_dict()
    missing = [k for k in own if k not in blobs]
    if strict and missing:
        raise WeightMismatchError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
    state = {}
    for key, value in own.items():
        if key not in blobs:
            continue
        if blobs[key].shape != tuple(value.shape):
            raise WeightMismatchError(f"{key}: shape {blobs[key].shape} != expected {tuple(value.shape)}")
        state[key] = torch.from_numpy(blobs[key].astype(np.float32)).to(value.dtype)
    model.load_state_dict(state, strict=False)
    model.to(device or default_device()).eval()
    return model, header


# ============================================================================
# INFERENCE WRAPPER
# ============================================================================

class Predictor:
    """
    Image in, typed detections out.

    input_scale < 1 shrinks the image before inference (which also shrinks
    the effective blur) and maps detections back to full resolution. The
    scaled image is cropped to a multiple of 8 at its bottom/right edges.
    """

    def __init__(self, model, cfg=None, input_scale=1.0, device=None):
        if not 0.0 < input_scale <= 1.0:
            raise InvalidArgumentError(f"input_scale must be in (0, 1], got {input_scale}")
        self.device = device or next(model.parameters()).device
        self.model = model.to(self.device).eval()
        self.cfg = cfg or model.cfg
        self.input_scale = input_scale

    def prepare(self, image):
        image = np.asarray(image)
        if image.ndim == 3:
            image = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
        if self.input_scale != 1.0:
            size = (max(CELL, int(round(image.shape[1] * self.input_scale))),
                    max(CELL, int(round(image.shape[0] * self.input_scale))))
            image = cv2.resize(image, size, interpolation=cv2.INTER_AREA)
        height = image.shape[0] - image.shape[0] % CELL
        width = image.shape[1] - image.shape[1] % CELL
        if height == 0 or width == 0:
            raise ShapeError(f"image {image.shape[1]}x{image.shape[0]} is smaller than one cell")
        return image[:height, :width]

    def predict(self, image):
        prepared = self.prepare(image)
        out = forward(self.model, to_input_tensor(prepared, self.device))
        return self.decode(out)

    def predict_batch(self, images):
        return [self.predict(img) for img in images]

    def decode(self, out, batch_index=0):
        dets = decode_keypoints(out, self.cfg.detect_threshold, self.cfg.nms_radius,
                                self.cfg.max_keypoints, batch_index)
        dets = decode_ids(out, dets, batch_index, self.cfg.background_veto)
        if self.input_scale != 1.0:
            scale = 1.0 / self.input_scale
            for det in dets:
                det.x = (det.x + 0.5) * scale - 0.5
                det.y = (det.y + 0.5) * scale - 0.5
        return dets


def draw_detections(image, detections, radius=6):
    """RGB copy of the image with detections circled and labelled by type"""
    canvas = cv2.cvtColor(image, cv2.COLOR_GRAY2RGB) if image.ndim == 2 else image.copy()
    colors = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (128, 128, 128)]
    for det in detections:
        type_id = BACKGROUND_ID if det.type_id is None else det.type_id
        center = (int(round(det.x)), int(round(det.y)))
        cv2.circle(canvas, center, radius, colors[type_id], 2)
        label = "?" if det.type_id is None else str(det.type_id)
        cv2.putText(canvas, label, (center[0] + radius, center[1] - radius),
                    cv2.FONT_HERSHEY_SIMPLEX, 0.5, colors[type_id], 1, cv2.LINE_AA)
    return canvas
