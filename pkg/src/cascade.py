"""
Two-stage segmentation cascade: breast mask, dense mask, percent density
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigurationError, ErrorCode, FormatError, TrainingError, create_file_not_found_error
from .file_writer import FileWriter
from .interfaces import LocalTrainer, SegmentationPredictor
from .models import BinaryMask, Image, PDResult, PhantomSample
from .phantom import split_by_subject
from .preprocess import (
    DEFAULT_TAG_THRESHOLD, apply_breast_mask, preprocess_for_network, resample_mask
)
from .serialization import encode_weights, load_weights
from .tensor_nn import (
    AdamState, ModelWeights, SegmentationDataset, UNet, UNetConfig,
    evaluate_loss, init_weights, train_epoch
)
from .utils import format_duration, make_rng

logger = logging.getLogger(__name__)

MODEL_NAMES = ("breast", "dense")
CONFIG_FILE = "cascade.cfg"

CHECKPOINT_BEST = "best"
CHECKPOINT_FINAL = "final"


@dataclass(frozen=True)
class CascadeModel:
    """Breast network, dense network and the probability cutoff"""
    breast_net: SegmentationPredictor
    dense_net: SegmentationPredictor
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.breast_net.input_size != self.dense_net.input_size:
            raise ConfigurationError(
                f"Cascade networks disagree on input size: "
                f"{self.breast_net.input_size} vs {self.dense_net.input_size}",
                config_key="input_size",
            )
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(f"threshold must be in (0, 1), got {self.threshold}", config_key="threshold")

    @property
    def input_size(self) -> int:
        return self.breast_net.input_size

    def weights(self) -> Dict[str, ModelWeights]:
        """Weights of both networks, keyed 'breast' and 'dense'"""
        nets = {"breast": self.breast_net, "dense": self.dense_net}
        for name, net in nets.items():
            if not isinstance(net, UNet):
                raise ConfigurationError(f"The {name} network carries no trainable weights", config_key=name)
        return {name: net.weights for name, net in nets.items()}


@dataclass(frozen=True)
class TrainingHyperparams:
    """Optimisation settings shared by both networks"""
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    validation_fraction: float = 0.2
    checkpoint: str = CHECKPOINT_BEST
    local_epochs: int = 1
    augment: bool = True
    tag_threshold: float = DEFAULT_TAG_THRESHOLD

    def __post_init__(self) -> None:
        if self.checkpoint not in (CHECKPOINT_BEST, CHECKPOINT_FINAL):
            raise ConfigurationError(
                f"checkpoint must be '{CHECKPOINT_BEST}' or '{CHECKPOINT_FINAL}'", config_key="checkpoint"
            )
        if self.batch_size < 1 or self.epochs < 0 or self.local_epochs < 1:
            raise ConfigurationError("batch_size and local_epochs must be >= 1, epochs >= 0", config_key="train")


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def percent_density(breast: BinaryMask, dense: BinaryMask) -> Optional[float]:
    """
    100 * |dense ∩ breast| / |breast|

    Returns:
        Percentage in [0, 100], or None when the breast mask is empty
    """
    overlap = dense.intersect(breast)
    if breast.area == 0:
        return None
    return 100.0 * overlap.area / breast.area


def _as_batch(images: Sequence[Image]) -> np.ndarray:
    return np.stack([image.pixels for image in images])[:, None].astype(np.float32)


def infer_many(model: CascadeModel, raws: Sequence[Image], batch_size: int = 16,
               tag_threshold: float = DEFAULT_TAG_THRESHOLD) -> List[PDResult]:
    """
    Run the cascade on raw images, batching both networks

    Empty predicted breast masks give a failed PDResult (pd_percent None)
    instead of an exception.
    """
    results: List[PDResult] = []
    size = model.input_size
    for start in range(0, len(raws), batch_size):
        chunk = list(raws[start:start + batch_size])
        prepared = [preprocess_for_network(raw, size, tag_threshold) for raw in chunk]
        breast_prob = model.breast_net.predict_proba(_as_batch(prepared))
        breast_small = [BinaryMask(prob[0] > model.threshold) for prob in breast_prob]
        masked = [apply_breast_mask(image, mask) for image, mask in zip(prepared, breast_small)]
        dense_prob = model.dense_net.predict_proba(_as_batch(masked))
        for raw, breast, prob in zip(chunk, breast_small, dense_prob):
            dense = BinaryMask(prob[0] > model.threshold).intersect(breast)
            breast_full = resample_mask(breast, raw.original_size)
            dense_full = resample_mask(dense, raw.original_size).intersect(breast_full)
            pd = percent_density(breast_full, dense_full)
            if pd is None:
                logger.warning("Predicted breast mask is empty; percent density undefined")
            results.append(PDResult(
                breast_mask=breast_full,
                dense_mask=dense_full,
                breast_area_px=breast_full.area,
                dense_area_px=dense_full.area,
                pd_percent=pd,
            ))
    return results


def infer(model: CascadeModel, raw: Image, tag_threshold: float = DEFAULT_TAG_THRESHOLD) -> PDResult:
    """
    Full pipeline for one raw image

    Pre-process, predict the breast, threshold, mask and re-normalise with
    the predicted breast, predict dense tissue, threshold, intersect with
    the breast, resample both masks to the original size and count pixels.
    """
    return infer_many(model, [raw], tag_threshold=tag_threshold)[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_stage_datasets(samples: Sequence[PhantomSample], input_size: int,
                         tag_threshold: float = DEFAULT_TAG_THRESHOLD) -> Tuple[SegmentationDataset, SegmentationDataset]:
    """
    Network inputs and targets for both stages

    The dense stage sees the image masked with the ground-truth breast
    mask and re-normalised inside it.
    """
    breast_inputs, breast_targets, dense_inputs, dense_targets = [], [], [], []
    for sample in samples:
        image = preprocess_for_network(sample.image, input_size, tag_threshold)
        breast = resample_mask(sample.breast_truth, input_size)
        dense = resample_mask(sample.dense_truth, input_size).intersect(breast)
        breast_inputs.append(image.pixels)
        breast_targets.append(breast.bits)
        dense_inputs.append(apply_breast_mask(image, breast).pixels)
        dense_targets.append(dense.bits)
    subjects = [sample.subject_id for sample in samples]

    def stack(arrays: List[np.ndarray]) -> np.ndarray:
        if not arrays:
            return np.zeros((0, 1, input_size, input_size), dtype=np.float32)
        return np.stack(arrays)[:, None].astype(np.float32)

    return (
        SegmentationDataset(stack(breast_inputs), stack(breast_targets), subjects),
        SegmentationDataset(stack(dense_inputs), stack(dense_targets), list(subjects)),
    )


def initial_weights(config: UNetConfig, seed: int) -> Dict[str, ModelWeights]:
    """Initial weights of both networks from the 'init/<model>' streams"""
    return {name: init_weights(config, make_rng(seed, "init", name)) for name in MODEL_NAMES}


def _split(samples: Sequence[PhantomSample], hyperparams: TrainingHyperparams,
           seed: int) -> Tuple[List[PhantomSample], List[PhantomSample]]:
    if not samples:
        raise TrainingError("No training images available", ErrorCode.EMPTY_PARTITION)
    return split_by_subject(samples, hyperparams.validation_fraction, make_rng(seed, "split"))


def _fit(name: str, model: UNet, train: SegmentationDataset, validation: SegmentationDataset,
         hyperparams: TrainingHyperparams, rng: np.random.Generator) -> UNet:
    state = AdamState.for_weights(model.weights, hyperparams.learning_rate, hyperparams.weight_decay)
    keep_best = hyperparams.checkpoint == CHECKPOINT_BEST and len(validation) > 0
    best_model, best_loss, best_epoch = model, float("inf"), 0
    for epoch in range(1, hyperparams.epochs + 1):
        model, state, train_loss = train_epoch(
            model, train, state, rng, hyperparams.batch_size, hyperparams.augment
        )
        if len(validation):
            val_loss = evaluate_loss(model, validation, hyperparams.batch_size)
            logger.info(f"[{name}] epoch {epoch}/{hyperparams.epochs} train_loss={train_loss:.5f} val_loss={val_loss:.5f}")
            if keep_best and val_loss < best_loss:
                best_model, best_loss, best_epoch = model, val_loss, epoch
        else:
            logger.info(f"[{name}] epoch {epoch}/{hyperparams.epochs} train_loss={train_loss:.5f}")
    if keep_best and best_epoch:
        logger.info(f"[{name}] keeping epoch {best_epoch} (val_loss={best_loss:.5f})")
        return best_model
    return model


def train_cascade(samples: Sequence[PhantomSample], hyperparams: TrainingHyperparams,
                  config: UNetConfig, seed: int, threshold: float = 0.5) -> CascadeModel:
    """
    Train both networks centrally

    Subjects are split 4:1 (by default) into training and validation;
    initial weights, the split and each network's shuffling come from
    named streams of ``seed``.

    Args:
        samples: Pool of phantom samples with ground truth
        hyperparams: Optimisation settings
        config: Architecture shared by both networks
        seed: Run seed
        threshold: Probability cutoff stored in the returned model

    Returns:
        Trained cascade; epochs=0 returns the initial weights
    """
    started = time.monotonic()
    train, validation = _split(samples, hyperparams, seed)
    logger.info(f"Training on {len(train)} images, validating on {len(validation)}")
    train_sets = build_stage_datasets(train, config.input_size, hyperparams.tag_threshold)
    validation_sets = build_stage_datasets(validation, config.input_size, hyperparams.tag_threshold)
    initial = initial_weights(config, seed)

    trained = {}
    for index, name in enumerate(MODEL_NAMES):
        trained[name] = _fit(
            name, UNet(config, initial[name]), train_sets[index], validation_sets[index],
            hyperparams, make_rng(seed, "train", name),
        )
    logger.info(f"Cascade training finished in {format_duration(time.monotonic() - started)}")
    return CascadeModel(trained["breast"], trained["dense"], threshold)


class CascadeLocalTrainer(LocalTrainer):
    """
    Collaborator-side training of both networks

    Holds the local train/validation split, the seeded shuffling streams
    and each network's Adam state, which persists across rounds and never
    leaves the collaborator.
    """

    def __init__(self, samples: Sequence[PhantomSample], hyperparams: TrainingHyperparams,
                 config: UNetConfig, seed: int, logger: Optional[logging.Logger] = None):
        self.hyperparams = hyperparams
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        train, _ = _split(samples, hyperparams, seed)
        self._datasets = dict(zip(MODEL_NAMES, build_stage_datasets(train, config.input_size, hyperparams.tag_threshold)))
        self._rngs = {name: make_rng(seed, "train", name) for name in MODEL_NAMES}
        self._states: Dict[str, AdamState] = {}
        self.rounds_completed = 0

    @property
    def sample_count(self) -> int:
        return len(self._datasets["breast"])

    def train_round(self, global_weights: Dict[str, ModelWeights]) -> Dict[str, ModelWeights]:
        if sorted(global_weights) != sorted(MODEL_NAMES):
            raise ConfigurationError(f"Expected weights for {MODEL_NAMES}, got {sorted(global_weights)}")
        updated = {}
        for name in MODEL_NAMES:
            model = UNet(self.config, global_weights[name])
            model.weights.check_matches(self.config)
            state = self._states.get(name) or AdamState.for_weights(
                model.weights, self.hyperparams.learning_rate, self.hyperparams.weight_decay
            )
            for _ in range(self.hyperparams.local_epochs):
                model, state, loss = train_epoch(
                    model, self._datasets[name], state, self._rngs[name],
                    self.hyperparams.batch_size, self.hyperparams.augment,
                )
                self.logger.info(f"[{name}] local round {self.rounds_completed + 1} train_loss={loss:.5f}")
            self._states[name] = state
            updated[name] = model.weights
        self.rounds_completed += 1
        return updated


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def cascade_from_weights(config: UNetConfig, weights: Dict[str, ModelWeights], threshold: float = 0.5) -> CascadeModel:
    return CascadeModel(UNet(config, weights["breast"]), UNet(config, weights["dense"]), threshold)


def save_cascade(model: CascadeModel, writer: FileWriter, subdirectory: Union[str, Path] = ".") -> Path:
    """
    Persist a cascade as breast.mflw, dense.mflw and cascade.cfg

    Returns:
        Directory holding the three files
    """
    weights = model.weights()
    config = model.breast_net.config  # type: ignore[attr-defined]
    base = Path(subdirectory)
    for name in MODEL_NAMES:
        writer.write_bytes(base / f"{name}.mflw", encode_weights(weights[name]))
    descriptor = "\n".join([
        f"input_size={config.input_size}",
        f"levels={config.levels}",
        f"base_channels={config.base_channels}",
        f"in_channels={config.in_channels}",
        f"out_channels={config.out_channels}",
        f"threshold={model.threshold!r}",
    ]) + "\n"
    writer.write_text(base / CONFIG_FILE, descriptor)
    return writer.resolve(base)


def load_cascade(directory: Union[str, Path]) -> CascadeModel:
    """
    Load a cascade written by save_cascade

    Raises:
        FileError: Missing descriptor or weight file
        FormatError: Malformed descriptor
        ShapeError: Weights that do not match the descriptor
    """
    base = Path(directory)
    descriptor = base / CONFIG_FILE
    if not descriptor.exists():
        raise create_file_not_found_error(str(descriptor))
    values = {}
    for line in descriptor.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{descriptor}: expected key=value, got '{line}'", ErrorCode.MALFORMED_HEADER,
                              format_name="cascade.cfg")
        values[key.strip()] = value.strip()
    try:
        config = UNetConfig(
            input_size=int(values["input_size"]),
            levels=int(values["levels"]),
            base_channels=int(values["base_channels"]),
            in_channels=int(values.get("in_channels", 1)),
            out_channels=int(values.get("out_channels", 1)),
        )
        threshold = float(values.get("threshold", 0.5))
    except (KeyError, ValueError) as e:
        raise FormatError(f"{descriptor}: invalid descriptor ({e})", ErrorCode.MALFORMED_HEADER,
                          format_name="cascade.cfg")
    weights = {name: load_weights(base / f"{name}.mflw") for name in MODEL_NAMES}
    for name in MODEL_NAMES:
        weights[name].check_matches(config)
    return cascade_from_weights(config, weights, threshold)
