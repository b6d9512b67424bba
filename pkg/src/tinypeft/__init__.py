"""tinypeft: parameter-efficient fine-tuning on a tiny self-contained stack.

A frozen encoder-decoder transformer with text-token and image-patch inputs,
a reverse-mode autodiff core, and an adapter zoo (residual input-embedding
link adapters, LoRA, prompt tuning, full fine-tuning) trained on synthetic
multimodal tasks.
"""

from .autodiff import ComputeGraph, Tensor, grad_check
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["ComputeGraph", "Tensor", "grad_check", "KERNEL_BACKEND", "__version__"]
