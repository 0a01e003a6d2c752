"""Mutual mean-teacher domain adaptation on synthetic identity-retrieval data."""

__version__ = "0.1.0"

from .diffcore import Tensor, backward, grad_check, new_tape, no_grad

__all__ = ["Tensor", "backward", "grad_check", "new_tape", "no_grad", "__version__"]
