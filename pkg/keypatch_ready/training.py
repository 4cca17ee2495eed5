# -*- coding: utf-8 -*-
"""
Training
Detector and ID losses, the three-stage freeze/unfreeze/augment schedule and
the epoch loop with per-epoch checkpoints and a JSON-lines metrics log.
"""
import json
import math
import os
import time
from bisect import bisect_right
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Set, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Subset
from tqdm import tqdm

from . import console
from .dataset_synth import BACKGROUND_ID, DUSTBIN
from .errors import InvalidArgumentError, NumericError, ShapeError, TrainingDivergedError
from .model import ADAPTATION_LAYERS, ENCODER_LAYERS, HEAD_LAYERS, KeypatchNet, ModelConfig, default_device, load_pretrained, save_checkpoint

DEFAULT_EPOCHS = 150


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults give the full 150-epoch recipe"""
    epochs: int = DEFAULT_EPOCHS
    lambda_descriptor: float = 0.2
    lambda_d: float = 640 * 480 / 5
    mp: float = 0.9
    mn: float = 0.2
    lr: float = 0.0005
    lr_decay: float = 0.2
    lr_decay_epochs: Tuple[int, ...] = (15, 45)
    optimizer: str = "adam"
    weight_decay: float = 1e-6
    freeze_until_epoch: int = 15
    unfreeze_range: Tuple[int, int] = (16, 30)
    augment_from_epoch: int = 31
    batch_size: int = 16
    seed: int = 0
    validate_every: int = 5
    num_workers: int = 0

    def validate(self):
        positive = ("epochs", "lambda_descriptor", "lambda_d", "mp", "mn", "lr", "lr_decay",
                    "batch_size", "augment_from_epoch", "validate_every")
        for name in positive:
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if self.optimizer.lower() != "adam":
            raise InvalidArgumentError(f"unsupported optimizer '{self.optimizer}'")
        if self.weight_decay < 0 or self.freeze_until_epoch < 0:
            raise InvalidArgumentError("weight_decay and freeze_until_epoch must be >= 0")
        if list(self.lr_decay_epochs) != sorted(self.lr_decay_epochs):
            raise InvalidArgumentError("lr_decay_epochs must be ascending")
        lo, hi = self.unfreeze_range
        if not self.freeze_until_epoch < lo <= hi < self.augment_from_epoch:
            raise InvalidArgumentError(
                "stage boundaries must satisfy freeze_until < unfreeze start <= unfreeze end < augment_from")
        return self

    def scaled(self, epochs):
        """Copy with every epoch boundary rescaled to a run of `epochs` epochs"""
        factor = epochs / float(self.epochs)

        def at(value):
            return max(1, int(round(value * factor)))

        freeze = at(self.freeze_until_epoch)
        unfreeze_end = max(freeze + 1, at(self.unfreeze_range[1]))
        return TrainConfig(**{**asdict(self),
                              "epochs": int(epochs),
                              "lr_decay_epochs": tuple(at(e) for e in self.lr_decay_epochs),
                              "freeze_until_epoch": freeze,
                              "unfreeze_range": (freeze + 1, unfreeze_end),
                              "augment_from_epoch": unfreeze_end + 1,
                              "validate_every": max(1, at(self.validate_every))})

    def to_dict(self):
        record = asdict(self)
        record["lr_decay_epochs"] = list(self.lr_decay_epochs)
        record["unfreeze_range"] = list(self.unfreeze_range)
        return record

    @classmethod
    def from_dict(cls, record):
        record = dict(record)
        for key in ("lr_decay_epochs", "unfreeze_range"):
            if key in record:
                record[key] = tuple(record[key])
        return cls(**record)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    stage: int = 1
    frozen: Set[str] = field(default_factory=set)
    running: Dict[str, float] = field(default_factory=dict)
    seed: int = 0


# ============================================================================
# LOSSES
# ============================================================================

def _batched(logits, target):
    if logits.dim() == 3:
        logits = logits[None]
    if target.dim() == 2:
        target = target[None]
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    return logits, target.long()


def detector_loss(detector_logits, detector_target):
    """Mean over cells of the 65-way cross-entropy"""
    logits, target = _batched(detector_logits, detector_target)
    if logits.shape[1] != DUSTBIN + 1:
        raise ShapeError(f"detector logits need {DUSTBIN + 1} channels, got {logits.shape[1]}")
    return F.cross_entropy(logits, target)


def descriptor_loss(id_logits, id_target, mp=0.9, mn=0.2, lambda_d=61440.0):
    """
    Hinge loss pulling each normalized ID vector d onto its one-hot target.

    Per cell: lambda_d * max(0, mp - d.t)^2 for patch cells (weight 1 for
    background cells) plus max(0, d.t' - mn)^2 summed over the four wrong
    one-hot vectors t'. Averaged over cells.
    """
    logits, target = _batched(id_logits, id_target)
    if logits.shape[1] != BACKGROUND_ID + 1:
        raise ShapeError(f"id logits need {BACKGROUND_ID + 1} channels, got {logits.shape[1]}")
    d = F.normalize(logits, p=2, dim=1)
    onehot = F.one_hot(target, BACKGROUND_ID + 1).permute(0, 3, 1, 2).to(d.dtype)
    positive = torch.clamp(mp - (d * onehot).sum(dim=1), min=0.0) ** 2
    negative = (torch.clamp(d - mn, min=0.0) ** 2 * (1.0 - onehot)).sum(dim=1)
    weight = torch.where(target == BACKGROUND_ID, torch.ones_like(positive), torch.full_like(positive, lambda_d))
    return (weight * positive + negative).mean()


def total_loss(detector_term, descriptor_term, lambda_descriptor=0.2):
    for name, value in (("detector", detector_term), ("descriptor", descriptor_term)):
        finite = torch.isfinite(value).all().item() if isinstance(value, torch.Tensor) else math.isfinite(value)
        if not finite:
            raise NumericError(f"{name} loss is not finite: {value}")
    return detector_term + lambda_descriptor * descriptor_term


# ============================================================================
# SCHEDULE
# ============================================================================

def learning_rate_at(cfg, epoch):
    """Learning rate in effect during `epoch` (1-based)"""
    return cfg.lr * cfg.lr_decay ** bisect_right(list(cfg.lr_decay_epochs), epoch - 1)


def stage_for_epoch(cfg, epoch, pretrained=True):
    """1: adaptation layers only, 2: everything, 3: everything plus augmentation"""
    if epoch >= cfg.augment_from_epoch:
        return 3
    if pretrained and epoch <= cfg.freeze_until_epoch:
        return 1
    return 2


class BaseFreezer:
    def maybe_freeze(self, epoch):
        raise NotImplementedError


class StagedFreezer(BaseFreezer):
    """Freezes the backbone during stage 1 and releases it afterwards"""

    def __init__(self, cfg, model, pretrained=True):
        self.cfg = cfg
        self.model = model
        self.pretrained = pretrained
        self.stage = None

    def maybe_freeze(self, epoch):
        stage = stage_for_epoch(self.cfg, epoch, self.pretrained)
        if stage != self.stage:
            trainable = stage > 1
            for p in self.model.backbone_parameters():
                p.requires_grad_(trainable)
            for p in self.model.adaptation_parameters():
                p.requires_grad_(True)
            if self.stage is not None or stage == 1:
                console.step(f" [Freezer] epoch {epoch}: stage {stage} "
                             f"({'backbone frozen' if not trainable else 'all layers trainable'})")
            self.stage = stage
        return stage

    def frozen_layers(self):
        layers = ENCODER_LAYERS + HEAD_LAYERS + ADAPTATION_LAYERS
        return {name for name in layers
                if not any(p.requires_grad for p in getattr(self.model, name).parameters())}


def gradient_norms(model):
    """L2 norm of the accumulated gradient per named layer (0 when absent)"""
    norms = {}
    for name in ENCODER_LAYERS + HEAD_LAYERS + ADAPTATION_LAYERS:
        total = 0.0
        for p in getattr(model, name).parameters():
            if p.grad is not None:
                total += float(p.grad.detach().pow(2).sum())
        norms[name] = math.sqrt(total)
    return norms


# ============================================================================
# LOOP
# ============================================================================

def compute_losses(model, batch, cfg, device):
    out = model(batch["image"].to(device))
    det = detector_loss(out.detector_logits, batch["detector_target"].to(device))
    desc = descriptor_loss(out.id_logits, batch["id_target"].to(device), cfg.mp, cfg.mn, cfg.lambda_d)
    return det, desc


def train_step(model, batch, optimizer, cfg, state, device):
    """One optimizer step; raises TrainingDivergedError on a non-finite loss"""
    optimizer.zero_grad(set_to_none=True)
    det, desc = compute_losses(model, batch, cfg, device)
    try:
        loss = total_loss(det, desc, cfg.lambda_descriptor)
    except NumericError:
        raise TrainingDivergedError(state.epoch, state.step, float(det.detach() + desc.detach()))
    loss.backward()
    optimizer.step()
    state.step += 1
    return {"loss_detector": float(det), "loss_descriptor": float(desc), "loss_total": float(loss)}


def _base_dataset(dataset):
    return dataset.dataset if isinstance(dataset, Subset) else dataset


def _set_epoch(dataset, epoch, cfg, stage):
    base = _base_dataset(dataset)
    if hasattr(base, "epoch"):
        base.epoch = epoch
        base.augment_from_epoch = cfg.augment_from_epoch if stage == 3 else None


def _append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


def train(cfg, dataset, model=None, pretrained=None, out_dir="runs/train", validation=None, device=None):
    """
    Run the staged training schedule.

    Parameters:
    -----------
    cfg : TrainConfig
    dataset : SyntheticDataset
        Training split; its augmentation switches on at cfg.augment_from_epoch.
    model : KeypatchNet, optional
        Created from ModelConfig defaults when omitted.
    pretrained : str, optional
        Reference SuperPoint weights. Without them stage 1 is skipped.
    out_dir : str
        Receives checkpoints/, metrics.jsonl and history.csv.
    validation : SyntheticDataset, optional
        Scored every cfg.validate_every epochs and at the last epoch.

    Returns:
    --------
    tuple : (final checkpoint path, pandas.DataFrame of per-epoch metrics)
    """
    cfg.validate()
    if len(dataset) == 0:
        raise InvalidArgumentError("training dataset is empty")
    device = device or default_device()
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)

    model = model or KeypatchNet(ModelConfig())
    if pretrained:
        load_pretrained(model, pretrained, strict=True, generator=torch.Generator().manual_seed(cfg.seed))
    model.to(device)

    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=list(cfg.lr_decay_epochs),
                                                     gamma=cfg.lr_decay)
    freezer = StagedFreezer(cfg, model, pretrained=bool(pretrained))
    state = TrainState(seed=cfg.seed)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, drop_last=False,
                        num_workers=cfg.num_workers, generator=torch.Generator().manual_seed(cfg.seed))

    console.section("TRAINING")
    console.step(f"  Samples: {len(dataset)}, batch size {cfg.batch_size}, epochs {cfg.epochs}")
    console.step(f"  Device: {device}, pretrained: {pretrained or 'none (stage 1 skipped)'}")

    history = []
    checkpoint = None
    start = time.time()
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        state.stage = freezer.maybe_freeze(epoch)
        state.frozen = freezer.frozen_layers()
        state.lr = optimizer.param_groups[0]["lr"]
        _set_epoch(dataset, epoch, cfg, state.stage)
        model.train()

        sums = {"loss_detector": 0.0, "loss_descriptor": 0.0, "loss_total": 0.0}
        n_batches = 0
        progress = tqdm(loader, desc=f"Epoch {epoch}/{cfg.epochs}", leave=False,
                        disable=not console.is_verbose())
        for batch in progress:
            losses = train_step(model, batch, optimizer, cfg, state, device)
            for key in sums:
                sums[key] += losses[key]
            n_batches += 1
            progress.set_postfix(loss=f"{losses['loss_total']:.4f}")
        state.running = {key: value / max(n_batches, 1) for key, value in sums.items()}

        record = {"epoch": epoch, "lr": state.lr, "stage": state.stage, **state.running,
                  "val_detection": None, "val_id": None, "val_false_alarm": None}
        if validation is not None and (epoch % cfg.validate_every == 0 or epoch == cfg.epochs):
            from .evaluation import evaluate_dataset
            report = evaluate_dataset(model, validation, device=device)
            record.update(val_detection=report.detection_score, val_id=report.id_matching_score,
                          val_false_alarm=report.average_false_alarm)
        _append_jsonl(metrics_path, record)
        history.append(record)

        checkpoint = save_checkpoint(model, os.path.join(ckpt_dir, f"epoch_{epoch:03d}.npz"),
                                     epoch=epoch, seed=cfg.seed, extra={"train_config": cfg.to_dict()})
        scheduler.step()
        console.step(f"  Epoch {epoch:3d} | stage {state.stage} | lr {state.lr:.2e} | "
                     f"loss {state.running['loss_total']:.4f}")

    final = save_checkpoint(model, os.path.join(out_dir, "final.npz"), epoch=cfg.epochs, seed=cfg.seed,
                            extra={"train_config": cfg.to_dict()})
    frame = pd.DataFrame(history)
    frame.to_csv(os.path.join(out_dir, "history.csv"), index=False)
    console.ok(f"Training finished in {(time.time() - start) / 60.0:.1f} min; last epoch checkpoint {checkpoint}")
    return final, frame


def overfit(model, batch, annotations, cfg=None, steps=500, device=None):
    """
    Fit one fixed batch with every layer trainable and no augmentation.

    `annotations` holds the SampleAnnotation of each batch item; recall is
    scored against the keypoints that survive into the cell targets, with the
    same matching rule as evaluation.

    Returns:
    --------
    dict
        final_loss, per-step losses and the fraction of ground-truth
        keypoints found with the correct type.
    """
    if len(annotations) != batch["image"].shape[0]:
        raise InvalidArgumentError(
            f"{len(annotations)} annotations for a batch of {batch['image'].shape[0]} images")
    cfg = cfg or TrainConfig()
    device = device or default_device()
    torch.manual_seed(cfg.seed)
    model.to(device).train()
    for p in model.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    state = TrainState(epoch=1, seed=cfg.seed)
    losses = []
    for _ in tqdm(range(steps), desc="Overfit", disable=not console.is_verbose()):
        losses.append(train_step(model, batch, optimizer, cfg, state, device)["loss_total"])

    from .dataset_synth import surviving_instances
    from .evaluation import id_correct_count, match_detections
    from .model import decode_ids, decode_keypoints
    model.eval()
    with torch.no_grad():
        out = model(batch["image"].to(device))
    found, total = 0, 0
    for b, ann in enumerate(annotations):
        truth = [ann.instances[i] for i, _, _ in surviving_instances(ann).values()]
        dets = decode_ids(out, decode_keypoints(out, model.cfg.detect_threshold, model.cfg.nms_radius,
                                                batch_index=b), batch_index=b)
        total += len(truth)
        found += id_correct_count(match_detections(dets, truth), dets, truth)
    return {"final_loss": losses[-1] if losses else float("nan"), "losses": losses,
            "recall": found / total if total else 1.0}
