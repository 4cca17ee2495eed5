"""
Keypatch Ready - Keypoint patch designs, synthetic training data and a
SuperPoint-style detector/identifier for semi-circle keypoint patches
"""

__version__ = '0.1.0'

from .patch_designs import canonical_designs, render_patch


def generate_dataset(out_dir, count=None, seed=0, config=None, validation=False, workers=None):
    """
    Synthesize a labeled dataset of keypoint patches on backgrounds.

    Parameters:
    -----------
    out_dir : str
        Dataset root; receives manifest.json, images/ and labels/.
        Indices already on disk are skipped, so an interrupted run resumes.

    count : int, optional
        Number of images. Defaults to the config's count (20,000) or
        validation_count (2,000) for the validation split.

    seed : int, default=0
        Master seed; image i is fully determined by (seed, split, i).

    config : str or RunConfig, optional
        YAML path or RunConfig; defaults are used when omitted.

    validation : bool, default=False
        Draw from the validation seed stream instead of the training one.

    workers : int, optional
        Synthesis processes; defaults to KEYPATCH_WORKERS or 1.

    Returns:
    --------
    dict
        The manifest written to out_dir.

    Examples:
    ---------
    >>> import keypatch_ready as kr
    >>> kr.generate_dataset("data/train", count=2000, seed=7)
    >>> kr.generate_dataset("data/val", count=200, seed=7, validation=True)
    """
    from .config import load_config, worker_count
    from .dataset_synth import TRAIN_STREAM, VALIDATION_STREAM, synthesize_dataset
    cfg = config if hasattr(config, "synth") else load_config(config)
    stream = VALIDATION_STREAM if validation else TRAIN_STREAM
    return synthesize_dataset(out_dir, cfg.synth, count=count, seed=seed, stream=stream,
                              workers=workers or worker_count())


def train_model(data_dir, out_dir, epochs=None, pretrained=None, val_dir=None, config=None):
    """
    Train the keypoint network on a synthesized dataset.

    Parameters:
    -----------
    data_dir : str
        Training dataset root.

    out_dir : str
        Receives checkpoints/, metrics.jsonl, history.csv and final.npz.

    epochs : int, optional
        Rescale the 150-epoch schedule to this many epochs.

    pretrained : str, optional
        Reference SuperPoint weights; without them stage 1 is skipped.

    val_dir : str, optional
        Validation dataset scored every few epochs.

    Returns:
    --------
    tuple : (final checkpoint path, pandas.DataFrame)
    """
    from .config import load_config
    from .dataset_synth import read_dataset
    from .model import KeypatchNet
    from .training import train
    cfg = config if hasattr(config, "train") else load_config(config)
    train_cfg = cfg.train.scaled(epochs) if epochs else cfg.train
    validation = read_dataset(val_dir) if val_dir else None
    return train(train_cfg, read_dataset(data_dir, cfg.synth.degradations), KeypatchNet(cfg.model),
                 pretrained=pretrained, out_dir=out_dir, validation=validation)


def detect(checkpoint, image, input_scale=1.0):
    """
    Detect and identify keypoint patches in one RGB or grayscale image.

    Returns:
    --------
    list of Detection
        Pixel coordinates, confidence, type_id and type_confidence.

    Example
    -------
    >>> import cv2, keypatch_ready as kr
    >>> img = cv2.cvtColor(cv2.imread("frame.png"), cv2.COLOR_BGR2RGB)
    >>> for det in kr.detect("runs/train/final.npz", img):
    ...     print(det.type_id, det.x, det.y)
    """
    from .model import Predictor, load_checkpoint
    model, _ = load_checkpoint(checkpoint)
    return Predictor(model, input_scale=input_scale).predict(image)


def validate_model(checkpoint, data_dir, out_dir=None, limit=None, input_scale=1.0):
    """
    Score a checkpoint on a validation dataset, clean and deteriorated.

    Outputs:
        - out_dir/validation_report.json (when out_dir is given)

    Returns:
    --------
    tuple : (clean EvalReport, deteriorated EvalReport)
    """
    from .dataset_synth import read_dataset
    from .evaluation import run_validation
    from .model import load_checkpoint
    model, _ = load_checkpoint(checkpoint)
    return run_validation(model, read_dataset(data_dir), input_scale=input_scale, limit=limit,
                          out_dir=out_dir)


def sweep(checkpoint, axis, levels=None, images_per_level=500, out_dir=None, seed=0, input_scale=1.0):
    """
    Hexagon-board sweep over one axis: scale, pitch, blur, dimming or
    gaussian_noise. Writes sweep_<axis>.json/.csv when out_dir is given.

    Returns:
    --------
    list of EvalReport
    """
    from .evaluation import SweepSpec, run_sweep
    from .model import load_checkpoint
    model, _ = load_checkpoint(checkpoint)
    spec = SweepSpec(axis=axis, levels=levels, images_per_level=images_per_level, seed=seed,
                     input_scale=input_scale)
    return run_sweep(model, spec, out_dir=out_dir)


def check_dataset(data_dir):
    """
    Verify a dataset root: counts, label parsing and label/homography agreement.

    Outputs:
        - data_dir/dataset_validation_report.json

    Returns:
    --------
    bool
        True when no errors were found.
    """
    from .dataset_synth import DatasetValidator
    return DatasetValidator(data_dir).validate()


# Public API
__all__ = [
    'canonical_designs',
    'render_patch',
    'generate_dataset',
    'train_model',
    'detect',
    'validate_model',
    'sweep',
    'check_dataset',
]
