"""Multi-feature frequency-aware detector for AI-synthesized images."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
