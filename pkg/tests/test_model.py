import json

import numpy as np
import pytest
import torch

from keypatch_ready.dataset_synth import CellTargets, decode_cell_targets
from keypatch_ready.errors import ShapeError, UnsupportedFormatError, WeightMismatchError
from keypatch_ready.model import (
    HEADER_KEY,
    Detection,
    KeypatchNet,
    ModelConfig,
    NetworkOutput,
    Predictor,
    decode_ids,
    decode_keypoints,
    ideal_logits,
    load_checkpoint,
    load_pretrained,
    nms_points,
    read_checkpoint_header,
    save_checkpoint,
)

SMALL = ModelConfig(encoder_channels=(8, 8, 8, 8, 16, 16, 16, 16), detector_width=16, descriptor_width=16)


def spike_output(cells, height=2, width=4, value=20.0):
    """Detector logits with dustbin everywhere except the given (row, col, position) spikes"""
    det = torch.zeros(1, 65, height, width)
    det[0, 64] = value
    for row, col, position in cells:
        det[0, :, row, col] = 0.0
        det[0, position, row, col] = value
    ids = torch.zeros(1, 5, height, width)
    return NetworkOutput(detector_logits=det, id_logits=ids)


class TestNetwork:

    @pytest.mark.parametrize("height, width", [(480, 640), (240, 320)])
    def test_output_shapes(self, height, width):
        model = KeypatchNet(SMALL).eval()
        with torch.no_grad():
            out = model(torch.rand(2, 1, height, width))
        assert tuple(out.detector_logits.shape) == (2, 65, height // 8, width // 8)
        assert tuple(out.id_logits.shape) == (2, 5, height // 8, width // 8)

    def test_default_widths(self):
        model = KeypatchNet()
        assert model.convDb.out_channels == 256
        assert model.adaptD.in_channels == 256 and model.adaptD.out_channels == 5
        assert model.adaptP.in_channels == 65 and model.adaptP.out_channels == 65

    def test_indivisible_input(self):
        with pytest.raises(ShapeError):
            KeypatchNet(SMALL)(torch.rand(1, 1, 480, 641))

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            KeypatchNet(SMALL)(torch.rand(1, 3, 64, 64))

    def test_detector_adaptation_starts_as_identity(self):
        model = KeypatchNet(SMALL)
        x = torch.randn(1, 65, 3, 3)
        torch.testing.assert_close(model.adaptP(x), x)

    def test_parameter_partition(self):
        model = KeypatchNet(SMALL)
        ids = {id(p) for p in model.adaptation_parameters()} | {id(p) for p in model.backbone_parameters()}
        assert ids == {id(p) for p in model.parameters()}
        assert not {id(p) for p in model.adaptation_parameters()} & {id(p) for p in model.backbone_parameters()}


class TestDecoding:

    def test_uniform_logits_below_threshold(self):
        out = NetworkOutput(torch.zeros(1, 65, 4, 4), torch.zeros(1, 5, 4, 4))
        assert decode_keypoints(out, threshold=0.1) == []

    def test_single_spike(self):
        out = spike_output([(1, 2, 4 * 8 + 4)])
        dets = decode_keypoints(out, threshold=0.1)
        assert len(dets) == 1
        assert (dets[0].x, dets[0].y) == (20.0, 12.0)
        assert dets[0].confidence > 0.9

    def test_nms_keeps_strongest(self):
        out = spike_output([(0, 0, 0)])
        out.detector_logits[0, :, 0, 0] = 0.0
        out.detector_logits[0, 9, 0, 0] = 20.0
        out.detector_logits[0, 10, 0, 0] = 19.0
        dets = decode_keypoints(out, threshold=0.1, nms_radius=4)
        assert len(dets) == 1
        assert (dets[0].x, dets[0].y) == (1.0, 1.0)
        assert len(decode_keypoints(out, threshold=0.1, nms_radius=0)) == 2

    def test_nms_points_order(self):
        xs = np.array([0, 10, 1])
        ys = np.array([0, 10, 0])
        scores = np.array([0.5, 0.9, 0.7])
        keep = nms_points(xs, ys, scores, 2, 16, 16)
        assert list(keep) == [1, 2]

    def test_max_keypoints(self):
        out = spike_output([(0, 0, 0), (1, 3, 63)])
        assert len(decode_keypoints(out, threshold=0.1, max_keypoints=1)) == 1

    def test_decode_ids(self):
        out = spike_output([(1, 2, 36)])
        out.id_logits[0, 2, 1, 2] = 10.0
        typed = decode_ids(out, decode_keypoints(out, threshold=0.1))
        assert len(typed) == 1
        assert typed[0].type_id == 2
        assert typed[0].type_confidence > 0.99

    def test_background_veto(self):
        out = spike_output([(1, 2, 36)])
        out.id_logits[0, 4, 1, 2] = 10.0
        out.id_logits[0, 1, 1, 2] = 5.0
        dets = decode_keypoints(out, threshold=0.1)
        assert decode_ids(out, dets) == []
        kept = decode_ids(out, dets, background_veto=False)
        assert kept[0].type_id == 1

    def test_uniform_id_tie(self):
        typed = decode_ids(spike_output([]), [Detection(x=3.0, y=3.0, confidence=0.5)])
        assert typed[0].type_id == 0
        assert typed[0].type_confidence == pytest.approx(0.2)

    def test_ideal_logits_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            detector = np.full((6, 8), 64, dtype=np.int64)
            ids = np.full((6, 8), 4, dtype=np.int64)
            for _ in range(int(rng.integers(0, 10))):
                row, col = int(rng.integers(0, 6)), int(rng.integers(0, 8))
                detector[row, col] = int(rng.integers(0, 64))
                ids[row, col] = int(rng.integers(0, 4))
            targets = CellTargets(detector=detector, id=ids)
            out = ideal_logits(targets)
            dets = decode_ids(out, decode_keypoints(out, nms_radius=0))
            expected = sorted(decode_cell_targets(targets))
            assert sorted((d.x, d.y, d.type_id) for d in dets) == expected


class TestCheckpoints:

    def test_round_trip(self, tmp_path):
        model = KeypatchNet(SMALL)
        path = save_checkpoint(model, str(tmp_path / "ckpt.npz"), epoch=3, seed=9)
        restored, header = load_checkpoint(path, device=torch.device("cpu"))
        assert header["epoch"] == 3 and header["seed"] == 9
        assert restored.cfg == model.cfg
        for key, value in model.state_dict().items():
            torch.testing.assert_close(restored.state_dict()[key], value)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(KeypatchNet(SMALL), str(tmp_path / "ckpt.npz"))
        with open(path, "rb") as f:
            data = f.read()
        with open(path, "wb") as f:
            f.write(data[: len(data) // 2])
        with pytest.raises(WeightMismatchError):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path):
        path = save_checkpoint(KeypatchNet(SMALL), str(tmp_path / "ckpt.npz"))
        with np.load(path) as archive:
            blobs = {k: archive[k] for k in archive.files if k != "conv1a.weight"}
        np.savez(path, **blobs)
        with pytest.raises(WeightMismatchError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = save_checkpoint(KeypatchNet(SMALL), str(tmp_path / "ckpt.npz"))
        header, blobs = read_checkpoint_header(path)
        header["version"] = 999
        blobs[HEADER_KEY] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
        np.savez(path, **blobs)
        with pytest.raises(UnsupportedFormatError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(str(tmp_path / "absent.npz"))


class TestPretrained:

    def _reference_state(self):
        source = KeypatchNet(SMALL)
        return {k: v for k, v in source.state_dict().items() if not k.startswith("adapt")}

    def test_loads_by_name(self, tmp_path):
        state = self._reference_state()
        path = str(tmp_path / "superpoint.pth")
        torch.save({"module." + k: v for k, v in state.items()}, path)
        model = load_pretrained(KeypatchNet(SMALL), path)
        for key, value in state.items():
            torch.testing.assert_close(model.state_dict()[key], value)
        x = torch.randn(1, 65, 2, 2)
        torch.testing.assert_close(model.adaptP(x), x)

    def test_strict_missing_key(self, tmp_path):
        state = self._reference_state()
        del state["convPa.bias"]
        path = str(tmp_path / "partial.pth")
        torch.save(state, path)
        with pytest.raises(WeightMismatchError):
            load_pretrained(KeypatchNet(SMALL), path)
        load_pretrained(KeypatchNet(SMALL), path, strict=False)

    def test_shape_mismatch(self, tmp_path):
        state = KeypatchNet(ModelConfig(encoder_channels=(8, 8, 8, 8, 16, 16, 16, 32),
                                        detector_width=16, descriptor_width=16)).state_dict()
        path = str(tmp_path / "other.pth")
        torch.save(state, path)
        with pytest.raises(WeightMismatchError):
            load_pretrained(KeypatchNet(SMALL), path)


class TestPredictor:

    def test_crops_to_grid(self):
        predictor = Predictor(KeypatchNet(SMALL), device=torch.device("cpu"))
        assert predictor.prepare(np.zeros((100, 130), dtype=np.uint8)).shape == (96, 128)

    def test_input_scale(self):
        predictor = Predictor(KeypatchNet(SMALL), input_scale=0.5, device=torch.device("cpu"))
        assert predictor.prepare(np.zeros((240, 320, 3), dtype=np.uint8)).shape == (120, 160)

    def test_predict_runs(self):
        predictor = Predictor(KeypatchNet(SMALL), device=torch.device("cpu"))
        dets = predictor.predict(np.random.default_rng(0).integers(0, 255, (64, 80), dtype=np.uint8))
        assert all(d.type_id in (0, 1, 2, 3) for d in dets)
        assert all(0 <= d.x < 80 and 0 <= d.y < 64 for d in dets)
