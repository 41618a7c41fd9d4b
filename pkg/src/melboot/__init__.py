"""melboot: desk-scale self-supervised audio pretraining.

A student encoder predicts latent targets from an EMA teacher over masked
log-mel patches, with an auxiliary alignment loss against a frozen external
embedding source. Everything runs on a small certified numpy autodiff core.
"""

__version__ = "0.1.0"

from .tensor import ParamSet, Tensor, finite_difference_grad, grad, no_grad

__all__ = ["Tensor", "ParamSet", "grad", "finite_difference_grad", "no_grad", "__version__"]
