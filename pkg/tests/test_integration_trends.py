"""
End-to-end experiment trends on phantom institutions

These train every regime from scratch and take minutes to hours; they are
deselected by ``-m "not slow"``.
"""

import math
import shutil
import tempfile
from pathlib import Path
from typing import Dict, Tuple

import pytest

from src.config import ExperimentConfig
from src.harness import cmd_evaluate, cmd_generate, cmd_train
from src.models import MetricSummary, Regime

CROSS_BASELINE = {"A": Regime.CENTRALIZED_B, "B": Regime.CENTRALIZED_A}


def _mae(summary: MetricSummary) -> float:
    return math.inf if summary.mae_mean is None else summary.mae_mean


def _run(config: ExperimentConfig, regimes) -> Dict[Tuple[Regime, str], MetricSummary]:
    cmd_generate(config)
    for regime in regimes:
        cmd_train(config.with_overrides(regime=regime))
    report = cmd_evaluate(config).report
    return {(s.regime, s.test_institution): s for s in report.summaries}


@pytest.mark.slow
@pytest.mark.integration
class TestRegimeTrends:
    """Test single-site baselines generalise worse than pooled and federated models"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    @pytest.mark.parametrize("seed", [7, 8, 9])
    def test_cross_institution_mae_ordering(self, seed):
        """Test pooled and federated MAE beat the other site's baseline on each test set"""
        config = ExperimentConfig(
            seed=seed,
            output_dir=str(Path(self.temp_dir) / f"seed{seed}"),
            image_size=32,
            unet={"input_size": 32, "levels": 2, "base_channels": 8},
            train={"epochs": 15, "batch_size": 8, "learning_rate": 1e-3},
            checkpoint="final",
            institutions={
                "A": {"view_style": "cc", "intensity_gain": 1.0, "breast_size_range": (0.5, 0.75), "n_subjects": 40},
                "B": {"view_style": "mlo", "intensity_gain": 0.7, "breast_size_range": (0.4, 0.6), "n_subjects": 40},
            },
        )
        summaries = _run(config, list(Regime))

        for institution, baseline in CROSS_BASELINE.items():
            other = _mae(summaries[(baseline, institution)])
            pooled = _mae(summaries[(Regime.CENTRALIZED_POOLED, institution)])
            federated = _mae(summaries[(Regime.FEDERATED, institution)])
            assert pooled < other, f"seed {seed}, test set {institution}"
            assert federated < other, f"seed {seed}, test set {institution}"


@pytest.mark.slow
@pytest.mark.integration
class TestDeskScaleSegmentation:
    """Test the pooled cascade on the default 64x64 phantoms"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_pooled_dice_on_both_institutions(self):
        """Test 30 epochs on 200 images per site reach breast DSC 0.95 and dense DSC 0.70"""
        config = ExperimentConfig(output_dir=str(Path(self.temp_dir) / "run"))
        summaries = _run(config, [Regime.CENTRALIZED_POOLED])

        for institution in ("A", "B"):
            summary = summaries[(Regime.CENTRALIZED_POOLED, institution)]
            assert summary.n_images == 50
            assert summary.breast_dsc_mean >= 0.95
            assert summary.dense_dsc_mean >= 0.70
