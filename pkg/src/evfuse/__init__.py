"""Event + RGB fusion library.

Building blocks for bimodal (frame + event camera) sequence classification:
a small float64 autodiff engine, event voxelization, a convolutional token
encoder, a coupled bidirectional selective state-space block, cross-attention
fusion with a parameter-free gate, a heterogeneous mixture-of-experts head,
recall metrics, and a trainer with a command-line front end.
"""

from .autodiff import (
    ContractError,
    DimensionError,
    GradientTape,
    NumericalError,
    Tensor,
    grad_check,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "GradientTape",
    "NumericalError",
    "Tensor",
    "grad_check",
]

__version__ = "0.1.0"
