"""
Tests for the two-stage cascade: inference, training and persistence
"""

import shutil
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.cascade import (
    CONFIG_FILE, CHECKPOINT_FINAL, CascadeLocalTrainer, CascadeModel,
    TrainingHyperparams, build_stage_datasets, cascade_from_weights, infer,
    infer_many, initial_weights, load_cascade, percent_density, save_cascade,
    train_cascade
)
from src.exceptions import ConfigurationError, ErrorCode, FileError, FormatError, ShapeError, TrainingError
from src.file_writer import FileWriter
from src.interfaces import SegmentationPredictor
from src.models import BinaryMask, Image
from src.phantom import default_profiles, generate_dataset
from src.preprocess import resample_mask
from src.tensor_nn import UNetConfig


class FixedPredictor(SegmentationPredictor):
    """Returns the same probability map for every image of a batch"""

    def __init__(self, probabilities: np.ndarray):
        self.probabilities = probabilities
        self.batches = []

    @property
    def input_size(self) -> int:
        return int(self.probabilities.shape[0])

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        self.batches.append(batch.copy())
        return np.broadcast_to(self.probabilities, (batch.shape[0], 1) + self.probabilities.shape).copy()


def _left_half(size=8, p=0.9):
    probs = np.full((size, size), 0.1)
    probs[:, : size // 2] = p
    return probs


def _top_left(size=8):
    probs = np.full((size, size), 0.1)
    probs[: size // 2, : size // 2] = 0.9
    return probs


def _tiny_samples(n_subjects=4):
    profile = replace(default_profiles(16)["A"], n_subjects=n_subjects)
    return generate_dataset(profile, seed=3)


TINY_CONFIG = UNetConfig(input_size=16, levels=1, base_channels=2)


class TestPercentDensity:
    """Test the PD formula"""

    def test_basic_ratio(self):
        """Test 100 * |dense & breast| / |breast|"""
        breast = BinaryMask(np.array([[True, True], [True, True]]))
        dense = BinaryMask(np.array([[True, False], [False, False]]))
        assert percent_density(breast, dense) == 25.0

    def test_dense_outside_breast_ignored(self):
        """Test dense pixels outside the breast do not count"""
        breast = BinaryMask(np.array([[True, False]]))
        dense = BinaryMask(np.array([[False, True]]))
        assert percent_density(breast, dense) == 0.0

    def test_empty_breast_is_undefined(self):
        """Test an empty breast mask gives None"""
        assert percent_density(BinaryMask.empty(2, 2), BinaryMask.full(2, 2)) is None

    def test_invariant_under_block_resampling(self):
        """Test PD is unchanged when both masks are block-expanded alike"""
        rng = np.random.default_rng(4)
        breast = BinaryMask(rng.random((6, 5)) > 0.3)
        dense = BinaryMask(rng.random((6, 5)) > 0.6)
        expected = percent_density(breast, dense)
        for factor in (2, 3):
            target = (6 * factor, 5 * factor)
            assert percent_density(resample_mask(breast, target), resample_mask(dense, target)) == expected


class TestCascadeModel:
    """Test cascade construction"""

    def test_input_sizes_must_agree(self):
        """Test mismatched network sizes are rejected"""
        with pytest.raises(ConfigurationError):
            CascadeModel(FixedPredictor(np.zeros((8, 8))), FixedPredictor(np.zeros((16, 16))))

    def test_threshold_range(self):
        """Test the cutoff must lie strictly inside (0, 1)"""
        with pytest.raises(ConfigurationError):
            CascadeModel(FixedPredictor(np.zeros((8, 8))), FixedPredictor(np.zeros((8, 8))), threshold=1.0)

    def test_fixed_predictors_have_no_weights(self):
        """Test weights() needs trainable networks"""
        model = CascadeModel(FixedPredictor(np.zeros((8, 8))), FixedPredictor(np.zeros((8, 8))))
        with pytest.raises(ConfigurationError):
            model.weights()

    def test_invalid_checkpoint(self):
        """Test unknown checkpoint policies"""
        with pytest.raises(ConfigurationError):
            TrainingHyperparams(checkpoint="middle")


class TestInference:
    """Test the inference pipeline with fixed predictors"""

    def setup_method(self):
        self.raw = Image.ingest(np.random.default_rng(0).random((16, 16)))

    def test_half_breast_quarter_dense(self):
        """Test masks are resampled to the raw size and PD counted there"""
        model = CascadeModel(FixedPredictor(_left_half()), FixedPredictor(_top_left()))
        result = infer(model, self.raw)
        assert result.breast_mask.bits.shape == (16, 16)
        assert result.breast_area_px == 128
        assert result.dense_area_px == 64
        assert result.pd_percent == 50.0
        assert not result.failed

    def test_dense_clipped_to_breast(self):
        """Test dense predictions outside the breast are dropped"""
        model = CascadeModel(FixedPredictor(_left_half()), FixedPredictor(np.full((8, 8), 0.9)))
        result = infer(model, self.raw)
        assert result.dense_mask.is_subset_of(result.breast_mask)
        assert result.pd_percent == 100.0

    def test_threshold_is_strict(self):
        """Test probabilities equal to the threshold are background"""
        model = CascadeModel(FixedPredictor(_left_half(p=0.5)), FixedPredictor(_top_left()))
        result = infer(model, self.raw)
        assert result.breast_area_px == 0

    def test_higher_threshold_never_grows_the_breast(self):
        """Test the breast area is non-increasing in the threshold"""
        ramp = np.linspace(0.05, 0.95, 64).reshape(8, 8)
        areas = []
        for threshold in (0.1, 0.3, 0.5, 0.7, 0.9):
            model = CascadeModel(FixedPredictor(ramp), FixedPredictor(_top_left()), threshold)
            areas.append(infer(model, self.raw).breast_area_px)
        assert areas == sorted(areas, reverse=True)
        assert areas[0] > areas[-1]

    def test_empty_breast_is_a_failure_not_an_error(self):
        """Test an empty predicted breast yields pd_percent None"""
        model = CascadeModel(FixedPredictor(np.zeros((8, 8))), FixedPredictor(np.ones((8, 8))))
        result = infer(model, self.raw)
        assert result.failed
        assert result.pd_percent is None
        assert result.dense_area_px == 0

    def test_dense_stage_sees_masked_input(self):
        """Test the second network receives zeros outside the breast"""
        dense_net = FixedPredictor(_top_left())
        model = CascadeModel(FixedPredictor(_left_half()), dense_net)
        infer(model, self.raw)
        seen = dense_net.batches[0][0, 0]
        assert not seen[:, 4:].any()
        assert seen[:, :4].max() == pytest.approx(1.0)

    def test_batched_matches_single(self):
        """Test infer_many gives one result per image, in order"""
        model = CascadeModel(FixedPredictor(_left_half()), FixedPredictor(_top_left()))
        raws = [self.raw, Image.ingest(np.ones((24, 12))), self.raw]
        results = infer_many(model, raws, batch_size=2)
        assert len(results) == 3
        assert results[1].breast_mask.bits.shape == (24, 12)
        assert results[0].pd_percent == infer(model, self.raw).pd_percent


class TestTraining:
    """Test central and collaborator-side training"""

    def test_stage_datasets(self):
        """Test both stages get network-size inputs and binary targets"""
        samples = _tiny_samples(2)
        breast, dense = build_stage_datasets(samples, 16)
        assert breast.inputs.shape == (4, 1, 16, 16)
        assert dense.targets.shape == (4, 1, 16, 16)
        assert set(np.unique(breast.targets)) <= {0.0, 1.0}
        assert not (dense.inputs[breast.targets == 0]).any()
        assert np.all(dense.targets <= breast.targets)

    def test_initial_weights_are_per_model(self):
        """Test breast and dense networks start from different streams"""
        weights = initial_weights(TINY_CONFIG, seed=1)
        assert not weights["breast"].bit_equal(weights["dense"])
        assert initial_weights(TINY_CONFIG, seed=1)["dense"].bit_equal(weights["dense"])

    def test_zero_epochs_returns_initial_weights(self):
        """Test epochs=0 trains nothing"""
        hyperparams = TrainingHyperparams(epochs=0)
        model = train_cascade(_tiny_samples(), hyperparams, TINY_CONFIG, seed=2)
        initial = initial_weights(TINY_CONFIG, seed=2)
        assert model.weights()["breast"] == initial["breast"]
        assert model.weights()["dense"] == initial["dense"]

    def test_empty_pool(self):
        """Test training without images raises EMPTY_PARTITION"""
        with pytest.raises(TrainingError) as exc_info:
            train_cascade([], TrainingHyperparams(epochs=1), TINY_CONFIG, seed=0)
        assert exc_info.value.error_code == ErrorCode.EMPTY_PARTITION

    def test_deterministic(self):
        """Test the same seed reproduces the same weights"""
        hyperparams = TrainingHyperparams(epochs=1, batch_size=4)
        a = train_cascade(_tiny_samples(), hyperparams, TINY_CONFIG, seed=5)
        b = train_cascade(_tiny_samples(), hyperparams, TINY_CONFIG, seed=5)
        assert a.weights()["breast"] == b.weights()["breast"]
        assert a.weights()["dense"] == b.weights()["dense"]

    def test_local_rounds_equal_central_epochs(self):
        """Test R single-epoch rounds reproduce R central epochs bit-for-bit"""
        samples = _tiny_samples()
        hyperparams = TrainingHyperparams(epochs=2, batch_size=3, checkpoint=CHECKPOINT_FINAL)
        central = train_cascade(samples, hyperparams, TINY_CONFIG, seed=8)

        trainer = CascadeLocalTrainer(samples, hyperparams, TINY_CONFIG, seed=8)
        weights = initial_weights(TINY_CONFIG, seed=8)
        for _ in range(hyperparams.epochs):
            weights = trainer.train_round(weights)
        assert trainer.rounds_completed == 2
        assert weights["breast"] == central.weights()["breast"]
        assert weights["dense"] == central.weights()["dense"]

    def test_local_trainer_counts_training_images(self):
        """Test n_i excludes the validation subjects"""
        trainer = CascadeLocalTrainer(_tiny_samples(5), TrainingHyperparams(), TINY_CONFIG, seed=0)
        assert trainer.sample_count == 8

    def test_local_trainer_rejects_wrong_models(self):
        """Test the broadcast must carry both networks"""
        trainer = CascadeLocalTrainer(_tiny_samples(), TrainingHyperparams(), TINY_CONFIG, seed=0)
        with pytest.raises(ConfigurationError):
            trainer.train_round({"breast": initial_weights(TINY_CONFIG, 0)["breast"]})


class TestPersistence:
    """Test save_cascade / load_cascade"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_round_trip(self):
        """Test weights, architecture and threshold survive"""
        model = cascade_from_weights(TINY_CONFIG, initial_weights(TINY_CONFIG, 4), threshold=0.4)
        directory = save_cascade(model, FileWriter(self.temp_dir), "models/federated")
        assert directory == Path(self.temp_dir) / "models" / "federated"
        assert (directory / CONFIG_FILE).exists()

        loaded = load_cascade(directory)
        assert loaded.threshold == 0.4
        assert loaded.input_size == 16
        assert loaded.weights()["breast"] == model.weights()["breast"]
        assert loaded.weights()["dense"] == model.weights()["dense"]

    def test_missing_descriptor(self):
        """Test loading an empty directory"""
        with pytest.raises(FileError) as exc_info:
            load_cascade(self.temp_dir)
        assert exc_info.value.error_code == ErrorCode.FILE_NOT_FOUND

    def test_malformed_descriptor(self):
        """Test descriptor lines must be key=value"""
        (Path(self.temp_dir) / CONFIG_FILE).write_text("input_size 16\n")
        with pytest.raises(FormatError):
            load_cascade(self.temp_dir)

    def test_weights_must_match_descriptor(self):
        """Test a descriptor that disagrees with the weight files"""
        model = cascade_from_weights(TINY_CONFIG, initial_weights(TINY_CONFIG, 4))
        directory = save_cascade(model, FileWriter(self.temp_dir))
        text = (directory / CONFIG_FILE).read_text().replace("base_channels=2", "base_channels=4")
        (directory / CONFIG_FILE).write_text(text)
        with pytest.raises(ShapeError):
            load_cascade(directory)
