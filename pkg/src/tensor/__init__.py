from .core import (
    DEFAULT_DTYPE,
    ComputationRecord,
    OpNode,
    Tensor,
    backward,
    current_record,
    is_grad_enabled,
    no_grad,
    reset_default_record,
)
from .nn import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    ModuleDict,
    ModuleList,
    Parameter,
)

__all__ = [
    "DEFAULT_DTYPE",
    "ComputationRecord",
    "OpNode",
    "Tensor",
    "backward",
    "current_record",
    "is_grad_enabled",
    "no_grad",
    "reset_default_record",
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2d",
    "Embedding",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleDict",
    "ModuleList",
    "Parameter",
]
