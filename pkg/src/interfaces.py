"""
Core interfaces for densityfed components
"""

from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Dict

import numpy as np

if TYPE_CHECKING:
    from .tensor_nn import ModelWeights


class SegmentationPredictor(ABC):
    """Anything that maps an NCHW batch to per-pixel probabilities"""

    @property
    @abstractmethod
    def input_size(self) -> int:
        """Spatial extent (H = W) the predictor expects"""
        pass

    @abstractmethod
    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        """Return probabilities in (0, 1) with the batch's N x 1 x H x W shape"""
        pass


class LocalTrainer(ABC):
    """Collaborator-side training delegate"""

    @property
    @abstractmethod
    def sample_count(self) -> int:
        """Number of training images held locally (n_i)"""
        pass

    @abstractmethod
    def train_round(self, global_weights: Dict[str, "ModelWeights"]) -> Dict[str, "ModelWeights"]:
        """Load the broadcast weights, train locally, return the updated weights"""
        pass
