"""Complementary patch training of class activation maps, on a numpy autodiff core."""
from .network import CPNModel
from .tensor import Tensor, no_grad, precision
from .training import TrainConfig

__all__ = ["CPNModel", "Tensor", "TrainConfig", "no_grad", "precision"]
__version__ = "0.1.0"
