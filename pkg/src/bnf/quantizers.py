"""Weight binarization, activation quantization and straight-through gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bitplane import BinaryWeightTensor, round_half_away

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuantizerConfig:
    activation_bits: int = 1
    weight_mode: str = "binary"  # or "full_precision"
    ste_clip: bool = True

    def __post_init__(self):
        if self.activation_bits < 1:
            raise ValueError("activation_bits must be >= 1")
        if self.weight_mode not in ("binary", "full_precision"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")


def binarize_weights(latent) -> BinaryWeightTensor:
    """``sign(w) * mean(|w|)`` with sign(0) = +1, one scale for the whole tensor."""
    w = np.asarray(latent, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot binarize an empty tensor")
    if not np.isfinite(w).all():
        raise ValueError("latent weights must be finite")
    scale = float(np.abs(w).mean())
    if scale == 0.0:
        log.warning("all-zero latent weights of shape %s; binarized scale is 0", w.shape)
    return BinaryWeightTensor.from_signs(w >= 0, scale)


def binarize_dense(latent: np.ndarray) -> np.ndarray:
    """Dense float view of :func:`binarize_weights`, in the latent dtype."""
    scale = np.abs(latent).mean(dtype=latent.dtype)
    return np.where(latent >= 0, scale, -scale).astype(latent.dtype, copy=False)


def bounded_activation(x):
    return np.clip(x, 0.0, 1.0)


def quantize_k(a, k: int = 1):
    a = np.asarray(a)
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.any(a < 0) or np.any(a > 1) or np.any(np.isnan(a)):
        raise ValueError("quantize_k expects inputs in [0, 1]; apply bounded_activation first")
    levels = (1 << k) - 1
    return (round_half_away(a * levels) / levels).astype(a.dtype if a.dtype.kind == "f" else np.float64)


def ste_backward(upstream_grad, forward_input, kind: str):
    g = np.asarray(upstream_grad)
    x = np.asarray(forward_input)
    if g.shape != x.shape:
        raise ValueError(f"shape mismatch: grad {g.shape} vs input {x.shape}")
    if kind == "weight_sign":
        return g
    if kind == "activation_quant":
        return g * ((x >= 0) & (x <= 1))
    raise ValueError(f"unknown STE kind {kind!r}")
