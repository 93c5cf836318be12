"""Minimal trainable-layer toolkit.

Five layer primitives (conv2d, fully-connected, relu, sigmoid, concat) with
explicit per-layer backward rules, a flat named parameter store with Adam
state, a DAG executor for small networks, a finite-difference gradient
checker, and a binary checkpoint format.

Tensors are plain numpy arrays: channel-last (batch, height, width, channel)
for convolutional layers and (batch, features) for fully-connected ones.
"""

from .params import ParamStore, adam_step
from .layers import Conv2D, FullyConnected, ReLU, Sigmoid, Concat, Network
from .gradcheck import grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "ParamStore",
    "adam_step",
    "Conv2D",
    "FullyConnected",
    "ReLU",
    "Sigmoid",
    "Concat",
    "Network",
    "grad_check",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]
