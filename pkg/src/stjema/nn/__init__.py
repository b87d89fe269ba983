from .autograd import Tensor, concat, layer_norm, linear, no_grad, stack
from .grad import grad_check, value_and_grad
from .layers import (
    gelu,
    gin_layer,
    gin_stack,
    gru_sequence,
    gru_step,
    mixer_block,
    node_features,
    relu,
    sero_readout,
    sigmoid,
)
from .params import ParamStore

__all__ = [
    "ParamStore",
    "Tensor",
    "concat",
    "gelu",
    "gin_layer",
    "gin_stack",
    "grad_check",
    "gru_sequence",
    "gru_step",
    "layer_norm",
    "linear",
    "mixer_block",
    "no_grad",
    "node_features",
    "relu",
    "sero_readout",
    "sigmoid",
    "stack",
    "value_and_grad",
]
