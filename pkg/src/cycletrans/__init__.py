"""Cross-modality feature transformation with prototype-based neutral features and cycle reconstruction."""
from .tensor import Tensor, Tape, backward, grad_check, precision

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "grad_check", "precision", "__version__"]
