"""Small neural-network substrate: graph autodiff, dense networks, Adam."""

from .adam import AdamState, NonFiniteGradientError, adam_step
from .autodiff import Node, ShapeError, backward, constant, grad, input_node, parameter
from .network import DenseNetwork

__all__ = [
    "AdamState",
    "DenseNetwork",
    "Node",
    "NonFiniteGradientError",
    "ShapeError",
    "adam_step",
    "backward",
    "constant",
    "grad",
    "input_node",
    "parameter",
]
