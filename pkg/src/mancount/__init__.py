"""Region attention, local attention regularization and instance attention
loss for crowd counting, on a small self-contained autodiff core."""

from .ndgrad import Tensor, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "finite_diff_check", "__version__"]
