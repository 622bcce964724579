"""Attention-masked single-image super-resolution on a small numpy autograd engine."""

from .models import AttnSRModel, ModelConfig
from .tensor import Parameter, ShapeError, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = ["AttnSRModel", "ModelConfig", "Parameter", "ShapeError", "Tensor", "backward", "grad_check"]
