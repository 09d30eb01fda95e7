"""Forward implementations of the layer set, float reference and packed binary.

Tensors are channel-last: ``(N, H, W, C)`` or a single ``(H, W, C)`` sample.
Convolutions use stride 1 and zero "same" padding; kernels are ``(kh, kw, C_in, I)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .bitplane import BinaryWeightTensor, BitPlaneTensor, FixedTensor, PackedBits, pack_bits
from .quantizers import QuantizerConfig, bounded_activation, quantize_k

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: tuple[int, int] = (3, 3)
    axis_policy: str = "full_2d"  # or "time_only"

    def __post_init__(self):
        if self.filters < 1 or min(self.kernel) < 1:
            raise ValueError("filters and kernel sizes must be positive")
        if self.axis_policy not in ("full_2d", "time_only"):
            raise ValueError(f"unknown axis policy {self.axis_policy!r}")

    @property
    def elements(self) -> int:
        return self.kernel[0] * self.kernel[1]


@dataclass(frozen=True)
class BilSpec:
    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("BIL needs K >= 1 filters")

    @property
    def conv(self) -> ConvSpec:
        return ConvSpec(self.K, (1, 1))


@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "BNState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))


def same_padding(kernel: tuple[int, int]) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding keeping spatial size at stride 1."""
    kh, kw = kernel
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return top, kh - 1 - top, left, kw - 1 - left


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    return x, False


def conv2d_reference(x, weights, spec: ConvSpec | None = None, count: bool = False):
    """Direct float convolution. With ``count=True`` also returns the number of
    scalar multiplications executed (padded taps included)."""
    x, squeeze = _batched(np.asarray(x, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    kh, kw, cin, n_out = w.shape
    if spec is not None and (spec.kernel != (kh, kw) or spec.filters != n_out):
        raise ValueError("weights do not match ConvSpec")
    if x.shape[-1] != cin:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    n, h, wd, _ = x.shape
    top, bottom, left, right = same_padding((kh, kw))
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    out = np.zeros((n, h, wd, n_out))
    mults = 0
    for ky in range(kh):
        for kx in range(kw):
            out += xp[:, ky:ky + h, kx:kx + wd, :] @ w[ky, kx]
            mults += n * h * wd * cin * n_out
    out = out[0] if squeeze else out
    return (out, mults) if count else out


def _packed_input(x) -> PackedBits:
    if isinstance(x, BitPlaneTensor):
        return x.planes
    if isinstance(x, PackedBits):
        return x
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise ValueError("binary convolution input must be in {0, 1}")
    return PackedBits(pack_bits(x.astype(np.uint8)), x.shape[-1])


def _binary_core(px: PackedBits, weights: BinaryWeightTensor) -> tuple[np.ndarray, bool]:
    kh, kw, cin, _ = weights.shape
    if px.channels != cin:
        raise ValueError(f"input has {px.channels} channels, kernel expects {cin}")
    words, squeeze = _batched(px.words)
    top, _, left, _ = same_padding((kh, kw))
    core = kernels.packed_conv(words, weights.conv_words, top, left)
    return (core[0] if squeeze else core), squeeze


def conv2d_binary(x, weights: BinaryWeightTensor, spec: ConvSpec | None = None) -> np.ndarray:
    """Convolution of {0,1} inputs with ±alpha weights through popcounts.

    The integer core is exact; alpha is applied once per output.
    """
    if spec is not None and (spec.kernel != weights.shape[:2] or spec.filters != weights.shape[3]):
        raise ValueError("weights do not match ConvSpec")
    core, _ = _binary_core(_packed_input(x), weights)
    return weights.scale * core.astype(np.float64)


def fpid_first_layer(x: FixedTensor, weights: BinaryWeightTensor, spec: ConvSpec | None = None):
    """Fixed-point input times binary weight, computed bit-plane by bit-plane as
    ``sum_m 2**m * (x_m * w)``; no input normalization."""
    if x.shape[-1] != weights.shape[2]:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {weights.shape[2]}")
    total = None
    for m in range(x.bit_width):
        plane = ((x.values >> m) & 1).astype(np.uint8)
        core, _ = _binary_core(PackedBits(pack_bits(plane), plane.shape[-1]), weights)
        total = core << m if total is None else total + (core << m)
    return weights.scale * total.astype(np.float64)


def dbi_first_layer(x: BitPlaneTensor, weights: BinaryWeightTensor, spec: ConvSpec | None = None):
    """One binary weight per bit plane per channel per tap: ``sum_m x_m * w_m``."""
    if weights.shape[2] != x.n_planes:
        raise ValueError(f"DBI weights need C*M = {x.n_planes} input channels, got {weights.shape[2]}")
    return conv2d_binary(x, weights, spec)


def batch_norm_inference(x: np.ndarray, state: BNState) -> np.ndarray:
    inv = state.gamma / np.sqrt(state.running_var + state.eps)
    return (x - state.running_mean) * inv + state.beta


def binary_activation(x: np.ndarray, k: int = 1) -> np.ndarray:
    return quantize_k(bounded_activation(x), k)


def bil_first_layer(x: BitPlaneTensor, bil: BilSpec, bil_weights: BinaryWeightTensor,
                    bn_state: BNState, qcfg: QuantizerConfig = QuantizerConfig()) -> PackedBits:
    """1x1 binary conv over the C*M planes, then BN, clamp and k-bit quantization."""
    if bil.K < 1:
        raise ValueError("BIL needs K >= 1 filters")
    if bil_weights.shape != (1, 1, x.n_planes, bil.K):
        raise ValueError(f"BIL weights must have shape (1, 1, {x.n_planes}, {bil.K})")
    if qcfg.activation_bits != 1:
        raise ValueError("packed BIL output requires 1-bit activations")
    s = conv2d_binary(x, bil_weights, bil.conv)
    a = binary_activation(batch_norm_inference(s, bn_state), qcfg.activation_bits)
    return PackedBits(pack_bits(a.astype(np.uint8)), bil.K)


def batch_norm_forward(x: np.ndarray, state: BNState, training: bool = False) -> np.ndarray:
    """Per-channel BN over all but the last axis. Training mode normalizes with
    batch statistics and updates the running ones in place."""
    if not training:
        return batch_norm_inference(x, state)
    axes = tuple(range(x.ndim - 1))
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    m = state.momentum
    state.running_mean = m * state.running_mean + (1 - m) * mean
    state.running_var = m * state.running_var + (1 - m) * var
    return (x - mean) / np.sqrt(var + state.eps) * state.gamma + state.beta


def max_pool(x: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """Non-overlapping max pooling, stride == window, trailing remainder dropped."""
    x, squeeze = _batched(np.asarray(x))
    ph, pw = window
    n, h, w, c = x.shape
    if ph > h or pw > w or ph < 1 or pw < 1:
        raise ValueError(f"pool window {window} does not fit input {h}x{w}")
    ho, wo = h // ph, w // pw
    out = x[:, :ho * ph, :wo * pw].reshape(n, ho, ph, wo, pw, c).max(axis=(2, 4))
    return out[0] if squeeze else out


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x)
    y = x.reshape(x.shape[0], -1) @ weights
    return y if bias is None else y + bias


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and class probabilities."""
    p = softmax(logits)
    idx = np.arange(len(labels))
    loss = -np.log(np.maximum(p[idx, labels], np.finfo(p.dtype).tiny)).mean()
    return float(loss), p


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None = None,
            training: bool = True) -> np.ndarray:
    """Inverted dropout; identity at inference."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate)

