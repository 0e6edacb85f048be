from . import autodiff
from .autodiff import Tensor
from .nets import DenseNet, ParamStore, adam_step
from .params_io import dumps_params, load_params, loads_params, save_params

__all__ = [
    "DenseNet",
    "ParamStore",
    "Tensor",
    "adam_step",
    "autodiff",
    "dumps_params",
    "load_params",
    "loads_params",
    "save_params",
]
