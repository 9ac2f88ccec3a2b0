"""
densityfed

Federated training of a two-stage U-Net cascade that estimates breast
percent density, simulated on synthetic phantom mammograms.
"""

__version__ = "0.1.0"
__license__ = "MIT"

# Main components
from .cascade import CascadeModel, TrainingHyperparams, infer, train_cascade
from .config import ExperimentConfig, RuntimeConfig
from .federation import aggregate, run_aggregator, run_collaborator
from .models import (
    BinaryMask,
    EvalRecord,
    Image,
    InstitutionProfile,
    PhantomSample,
    Regime,
)
from .tensor_nn import ModelWeights, UNet, UNetConfig

__all__ = [
    "CascadeModel",
    "TrainingHyperparams",
    "infer",
    "train_cascade",
    "ExperimentConfig",
    "RuntimeConfig",
    "aggregate",
    "run_aggregator",
    "run_collaborator",
    "BinaryMask",
    "EvalRecord",
    "Image",
    "InstitutionProfile",
    "PhantomSample",
    "Regime",
    "ModelWeights",
    "UNet",
    "UNetConfig",
]
