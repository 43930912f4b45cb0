"""Module-aware masked unlearning for a small gated transformer classifier."""

__version__ = "0.1.0"

from .tinyformer import Batch, ModelConfig, ModelState, load_state, save_state  # noqa: E402
from .maskselect import MaskPair, load_mask, save_mask  # noqa: E402
from .config import ExperimentConfig  # noqa: E402

__all__ = [
    "Batch",
    "ExperimentConfig",
    "MaskPair",
    "ModelConfig",
    "ModelState",
    "load_mask",
    "load_state",
    "save_mask",
    "save_state",
]
