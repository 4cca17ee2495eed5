import json
import math
import os

import numpy as np
import pytest
import torch
from torch.utils.data import DataLoader

from keypatch_ready.dataset_synth import read_dataset
from keypatch_ready.errors import InvalidArgumentError, NumericError, ShapeError
from keypatch_ready.model import ENCODER_LAYERS, HEAD_LAYERS, KeypatchNet, ModelConfig, load_checkpoint
from keypatch_ready.training import (
    StagedFreezer,
    TrainConfig,
    compute_losses,
    descriptor_loss,
    detector_loss,
    gradient_norms,
    learning_rate_at,
    overfit,
    stage_for_epoch,
    total_loss,
    train,
)

SMALL = ModelConfig(encoder_channels=(8, 8, 8, 8, 16, 16, 16, 16), detector_width=16, descriptor_width=16)
CPU = torch.device("cpu")


def one_hot_logits(target, channels, magnitude=10.0):
    onehot = torch.nn.functional.one_hot(target, channels).permute(0, 3, 1, 2).double()
    return onehot * 2 * magnitude - magnitude


class TestDetectorLoss:

    def test_perfect_prediction(self):
        target = torch.randint(0, 65, (2, 4, 5))
        assert float(detector_loss(one_hot_logits(target, 65), target)) < 1e-3

    def test_uniform_prediction(self):
        target = torch.randint(0, 65, (1, 3, 3))
        loss = detector_loss(torch.zeros(1, 65, 3, 3), target)
        assert float(loss) == pytest.approx(math.log(65), rel=1e-6)

    def test_unbatched(self):
        target = torch.randint(0, 65, (3, 3))
        assert float(detector_loss(torch.zeros(65, 3, 3), target)) == pytest.approx(math.log(65), rel=1e-6)

    def test_gradcheck(self):
        logits = torch.randn(1, 65, 2, 3, dtype=torch.float64, requires_grad=True)
        target = torch.randint(0, 65, (1, 2, 3))
        assert torch.autograd.gradcheck(lambda x: detector_loss(x, target), (logits,))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            detector_loss(torch.zeros(1, 65, 3, 3), torch.zeros(1, 4, 3, dtype=torch.long))
        with pytest.raises(ShapeError):
            detector_loss(torch.zeros(1, 64, 3, 3), torch.zeros(1, 3, 3, dtype=torch.long))


class TestDescriptorLoss:

    def test_zero_at_target(self):
        target = torch.randint(0, 5, (2, 3, 4))
        logits = one_hot_logits(target, 5, magnitude=0.5) + 0.5
        assert float(descriptor_loss(logits, target)) == pytest.approx(0.0, abs=1e-12)

    def test_positive_hinge(self):
        d = torch.tensor([-math.sqrt(3) / 2, 0.0, 0.5, 0.0, 0.0], dtype=torch.float64).view(1, 5, 1, 1)
        target = torch.tensor([[[2]]])
        assert float(descriptor_loss(d, target, lambda_d=1.0)) == pytest.approx(0.16)
        assert float(descriptor_loss(d, target, lambda_d=61440.0)) == pytest.approx(0.16 * 61440.0)

    def test_background_cells_weight_one(self):
        d = torch.tensor([0.0, 0.0, 0.0, 0.0, 0.5], dtype=torch.float64).view(1, 5, 1, 1)
        target = torch.tensor([[[4]]])
        # normalized d is the background one-hot, so only a fully wrong vector is penalized
        assert float(descriptor_loss(d, target, lambda_d=1000.0)) == pytest.approx(0.0)
        wrong = torch.tensor([0.0, 1.0, 0.0, 0.0, 0.0], dtype=torch.float64).view(1, 5, 1, 1)
        expected = 0.9 ** 2 + 0.8 ** 2
        assert float(descriptor_loss(wrong, target, lambda_d=1000.0)) == pytest.approx(expected)

    def test_gradcheck(self):
        torch.manual_seed(0)
        logits = torch.randn(1, 5, 2, 2, dtype=torch.float64, requires_grad=True)
        target = torch.tensor([[[0, 4], [2, 3]]])
        assert torch.autograd.gradcheck(lambda x: descriptor_loss(x, target, lambda_d=3.0), (logits,))

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            descriptor_loss(torch.zeros(1, 4, 2, 2), torch.zeros(1, 2, 2, dtype=torch.long))

    def test_total_loss(self):
        assert float(total_loss(torch.tensor(1.0), torch.tensor(2.0))) == pytest.approx(1.4)
        with pytest.raises(NumericError):
            total_loss(torch.tensor(float("nan")), torch.tensor(1.0))
        with pytest.raises(NumericError):
            total_loss(torch.tensor(1.0), torch.tensor(float("inf")))


class TestSchedule:

    def test_learning_rate(self):
        cfg = TrainConfig()
        assert learning_rate_at(cfg, 1) == pytest.approx(5e-4)
        assert learning_rate_at(cfg, 15) == pytest.approx(5e-4)
        assert learning_rate_at(cfg, 16) == pytest.approx(1e-4)
        assert learning_rate_at(cfg, 50) == pytest.approx(2e-5)

    def test_stages(self):
        cfg = TrainConfig()
        assert [stage_for_epoch(cfg, e) for e in (1, 15, 16, 30, 31, 150)] == [1, 1, 2, 2, 3, 3]
        assert stage_for_epoch(cfg, 1, pretrained=False) == 2

    def test_scaled_schedule_is_valid(self):
        for epochs in (2, 10, 30, 300):
            cfg = TrainConfig().scaled(epochs)
            cfg.validate()
            assert cfg.epochs == epochs

    def test_bad_boundaries(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(unfreeze_range=(16, 40)).validate()

    def test_freezer_controls_gradients(self):
        torch.manual_seed(0)
        model = KeypatchNet(SMALL)
        freezer = StagedFreezer(TrainConfig(), model, pretrained=True)
        batch = {"image": torch.rand(2, 1, 32, 32),
                 "detector_target": torch.randint(0, 65, (2, 4, 4)),
                 "id_target": torch.randint(0, 5, (2, 4, 4))}

        def backward():
            model.zero_grad(set_to_none=True)
            det, desc = compute_losses(model, batch, TrainConfig(lambda_d=1.0), CPU)
            (det + desc).backward()
            return gradient_norms(model)

        assert freezer.maybe_freeze(10) == 1
        norms = backward()
        assert all(norms[name] == 0.0 for name in ENCODER_LAYERS + HEAD_LAYERS)
        assert norms["adaptP"] > 0 and norms["adaptD"] > 0
        assert freezer.frozen_layers() == set(ENCODER_LAYERS + HEAD_LAYERS)

        assert freezer.maybe_freeze(16) == 2
        norms = backward()
        assert norms["conv1a"] > 0 and norms["convDb"] > 0
        assert freezer.frozen_layers() == set()


class TestTrainLoop:

    def _run(self, data, out_dir):
        cfg = TrainConfig().scaled(2)
        cfg.batch_size = 2
        torch.manual_seed(0)
        return train(cfg, read_dataset(data), KeypatchNet(SMALL), out_dir=out_dir, device=CPU)

    def test_two_epoch_run(self, tiny_dataset, tmp_path):
        out_dir = str(tmp_path / "run")
        final, history = self._run(tiny_dataset, out_dir)
        assert os.path.exists(final)
        assert len(history) == 2
        assert list(history["epoch"]) == [1, 2]
        assert np.isfinite(history["loss_total"]).all()
        for epoch in (1, 2):
            assert os.path.exists(os.path.join(out_dir, "checkpoints", f"epoch_{epoch:03d}.npz"))
        with open(os.path.join(out_dir, "metrics.jsonl")) as f:
            records = [json.loads(line) for line in f]
        assert [r["epoch"] for r in records] == [1, 2]
        assert os.path.exists(os.path.join(out_dir, "history.csv"))
        _, header = load_checkpoint(final, device=CPU)
        assert header["epoch"] == 2 and header["train_config"]["epochs"] == 2

    def test_same_seed_same_weights(self, tiny_dataset, tmp_path):
        first, _ = self._run(tiny_dataset, str(tmp_path / "a"))
        second, _ = self._run(tiny_dataset, str(tmp_path / "b"))
        a, _ = load_checkpoint(first, device=CPU)
        b, _ = load_checkpoint(second, device=CPU)
        for key, value in a.state_dict().items():
            torch.testing.assert_close(b.state_dict()[key], value)


@pytest.mark.slow
def test_overfit_single_batch(tmp_path, small_cfg):
    from keypatch_ready.dataset_synth import synthesize_dataset

    small_cfg.count = 8
    synthesize_dataset(str(tmp_path / "data"), small_cfg, seed=3)
    dataset = read_dataset(str(tmp_path / "data"))
    batch = next(iter(DataLoader(dataset, batch_size=8)))
    annotations = [dataset.annotation(int(i)) for i in batch["index"]]
    torch.manual_seed(0)
    result = overfit(KeypatchNet(), batch, annotations, steps=500, device=CPU)
    assert result["final_loss"] < 0.05
    assert result["recall"] >= 0.95


class TestOverfitRecall:

    def _setup(self, tiny_dataset):
        from keypatch_ready.dataset_synth import surviving_instances

        dataset = read_dataset(tiny_dataset)
        batch = next(iter(DataLoader(dataset, batch_size=len(dataset))))
        annotations = [dataset.annotation(int(i)) for i in batch["index"]]
        truths = [[ann.instances[i] for i, _, _ in surviving_instances(ann).values()] for ann in annotations]
        assert sum(len(t) for t in truths) > 0
        return batch, annotations, truths

    def _decoded_as(self, monkeypatch, truths, offset_fraction, type_shift=0):
        from keypatch_ready import model as model_module
        from keypatch_ready.model import Detection

        monkeypatch.setattr(model_module, "decode_keypoints", lambda out, *a, batch_index=0, **k: batch_index)
        monkeypatch.setattr(model_module, "decode_ids", lambda out, b, batch_index=0, **k: [
            Detection(x=t.x + offset_fraction * t.radius_px, y=t.y, confidence=1.0, type_id=(t.type_id + type_shift) % 4)
            for t in truths[b]])

    def test_within_match_radius(self, tiny_dataset, monkeypatch):
        batch, annotations, truths = self._setup(tiny_dataset)
        self._decoded_as(monkeypatch, truths, 0.08)
        result = overfit(KeypatchNet(SMALL), batch, annotations, steps=0, device=CPU)
        assert result["recall"] == 1.0

    def test_outside_match_radius(self, tiny_dataset, monkeypatch):
        batch, annotations, truths = self._setup(tiny_dataset)
        self._decoded_as(monkeypatch, truths, 0.12)
        assert overfit(KeypatchNet(SMALL), batch, annotations, steps=0, device=CPU)["recall"] == 0.0

    def test_wrong_type_not_recalled(self, tiny_dataset, monkeypatch):
        batch, annotations, truths = self._setup(tiny_dataset)
        self._decoded_as(monkeypatch, truths, 0.0, type_shift=1)
        assert overfit(KeypatchNet(SMALL), batch, annotations, steps=0, device=CPU)["recall"] == 0.0

    def test_annotation_count_checked(self, tiny_dataset):
        batch, annotations, _ = self._setup(tiny_dataset)
        with pytest.raises(InvalidArgumentError):
            overfit(KeypatchNet(SMALL), batch, annotations[:-1], steps=0, device=CPU)
