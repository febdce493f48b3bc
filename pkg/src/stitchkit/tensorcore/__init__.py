"""Dense tensors, layer graphs, reverse-mode gradients and Adam."""

from .checkpoint import copy_parameters, load_checkpoint, save_checkpoint
from .graph import Gradients, Graph, Node, backward, backward_from, forward, grad_check, run_backward, run_forward
from .layers import LayerKind, LayerSpec, resize_bilinear, resize_bilinear_backward
from .optim import AdamState, adam_step, lr_at
from .tensor import Tensor4, as_array

__all__ = [
    "AdamState",
    "Gradients",
    "Graph",
    "LayerKind",
    "LayerSpec",
    "Node",
    "Tensor4",
    "adam_step",
    "as_array",
    "backward",
    "backward_from",
    "copy_parameters",
    "forward",
    "grad_check",
    "load_checkpoint",
    "lr_at",
    "resize_bilinear",
    "resize_bilinear_backward",
    "run_backward",
    "run_forward",
    "save_checkpoint",
]
