"""Binary input layers for fully binarized CNNs.

Bit-plane input decomposition, packed XNOR/popcount kernels, STE training of
the baseline, FPID, DBI and BIL first-layer strategies, and a gate-count cost
model for the first layer.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from .bitplane import (BinaryWeightTensor, BitPlaneTensor, FixedTensor, PackedBits, binary_dot_01,
                       decompose, recompose, to_fixed_point)
from .kernels import BACKEND

__all__ = [
    "BACKEND", "BinaryWeightTensor", "BitPlaneTensor", "FixedTensor", "PackedBits",
    "binary_dot_01", "decompose", "recompose", "to_fixed_point",
]
