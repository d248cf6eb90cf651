"""Multi-task adapters (VMT-Adapter and its Kronecker-factorized Lite form) on a small hierarchical transformer."""

from .adapters import AdapterBank, adapter_forward, build_adapter_bank, lite_materialize, vmt_forward
from .autodiff import Tensor, backward, grad_check, kronecker
from .config import ExperimentConfig, ModelConfig
from .metrics import delta_up

__all__ = [
    "AdapterBank",
    "ExperimentConfig",
    "ModelConfig",
    "Tensor",
    "adapter_forward",
    "backward",
    "build_adapter_bank",
    "delta_up",
    "grad_check",
    "kronecker",
    "lite_materialize",
    "vmt_forward",
]
