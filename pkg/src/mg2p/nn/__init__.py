from . import functional
from .gradcheck import GradientError, gradient_check
from .serialize import tensor_from_bytes, tensor_to_bytes, write_tensor
from .tensor import DEFAULT_DTYPE, Tensor, is_grad_enabled, no_grad

__all__ = [
    "DEFAULT_DTYPE",
    "GradientError",
    "Tensor",
    "functional",
    "gradient_check",
    "is_grad_enabled",
    "no_grad",
    "tensor_from_bytes",
    "tensor_to_bytes",
    "write_tensor",
]
