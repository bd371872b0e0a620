"""Multimodal state-space flood damage mapping on a numpy autodiff substrate."""

from .encoders import ModalityBundle, ModelConfig
from .ffss import WIRINGS, FloodDamageModel, Wiring
from .tensor import Tensor, no_grad

__all__ = ["FloodDamageModel", "ModalityBundle", "ModelConfig", "Tensor", "WIRINGS", "Wiring", "no_grad"]
__version__ = "0.1.0"
