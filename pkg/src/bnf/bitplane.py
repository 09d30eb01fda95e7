"""Fixed-point tensors, bit-plane decomposition and packed binary dot products.

Packed layout: bits are stored LSB-first in little-endian uint64 words along
the last (channel) axis. Bit ``j`` of a row lives in word ``j // 64`` at
position ``j % 64``; unused high bits of the final word are always zero.

For multi-channel inputs the bit planes are laid out channel-major, i.e.
plane ``m`` of channel ``c`` is channel ``c * M + m`` of the decomposed tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels

WORD_BITS = 64
MAX_BIT_WIDTH = 16


def n_words(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (``np.round`` is half-even)."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a {0,1} array along its last axis into uint64 words."""
    bits = np.asarray(bits)
    if bits.ndim == 0:
        raise ValueError("pack_bits needs at least one axis")
    n = bits.shape[-1]
    nw = n_words(n)
    padded = np.zeros(bits.shape[:-1] + (nw * WORD_BITS,), dtype=np.uint8)
    padded[..., :n] = bits
    as_bytes = np.packbits(padded, axis=-1, bitorder="little")
    # 8 little-endian bytes per word
    return np.ascontiguousarray(as_bytes).view("<u8").astype(np.uint64, copy=False)


def unpack_bits(words: np.ndarray, n_bits: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns uint8 {0,1} of length ``n_bits``."""
    words = np.ascontiguousarray(words, dtype="<u8")
    if words.shape[-1] != n_words(n_bits):
        raise ValueError(f"{words.shape[-1]} words cannot hold exactly {n_bits} bits")
    as_bytes = words.view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1, bitorder="little")[..., :n_bits]


@dataclass(frozen=True)
class PackedBits:
    """A {0,1} tensor packed along its last axis. ``channels`` is the logical length."""

    words: np.ndarray
    channels: int

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.shape[-1] != n_words(self.channels):
            raise ValueError("word count does not match channel count")
        tail = self.channels % WORD_BITS
        if tail and np.any(words[..., -1] >> np.uint64(tail)):
            raise ValueError("padding bits must be zero")
        object.__setattr__(self, "words", words)

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "PackedBits":
        bits = np.asarray(bits)
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("input values must be in {0, 1}")
        return cls(pack_bits(bits), bits.shape[-1])

    @property
    def shape(self) -> tuple[int, ...]:
        return self.words.shape[:-1] + (self.channels,)

    def unpack(self) -> np.ndarray:
        return unpack_bits(self.words, self.channels)


@dataclass(frozen=True)
class FixedTensor:
    """Unsigned M-bit fixed-point tensor, last axis is the channel axis."""

    values: np.ndarray
    bit_width: int

    def __post_init__(self):
        if not 1 <= self.bit_width <= MAX_BIT_WIDTH:
            raise ValueError(f"bit width must be in 1..{MAX_BIT_WIDTH}, got {self.bit_width}")
        v = np.asarray(self.values)
        if v.ndim < 1 or v.ndim > 4:
            raise ValueError("FixedTensor supports rank 1..4")
        if 0 in v.shape:
            raise ValueError("all dims must be >= 1")
        if not np.issubdtype(v.dtype, np.integer):
            raise TypeError(f"fixed-point values must be integers, got {v.dtype}")
        if v.min() < 0 or v.max() >= (1 << self.bit_width):
            raise ValueError(f"values out of range for M={self.bit_width}")
        object.__setattr__(self, "values", v.astype(np.uint16))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class BitPlaneTensor:
    """Bit-decomposed fixed-point tensor: logical shape ``base_shape[:-1] + (C*M,)``."""

    base_shape: tuple[int, ...]
    bit_width: int
    planes: PackedBits

    def __post_init__(self):
        c = self.base_shape[-1]
        if self.planes.shape != tuple(self.base_shape[:-1]) + (c * self.bit_width,):
            raise ValueError("plane tensor shape does not match base shape and bit width")

    @property
    def n_planes(self) -> int:
        return self.base_shape[-1] * self.bit_width

    @property
    def words(self) -> np.ndarray:
        return self.planes.words

    @property
    def channels(self) -> int:
        return self.n_planes

    def plane(self, m: int, c: int = 0) -> np.ndarray:
        """{0,1} array of bit ``m`` of channel ``c``."""
        return self.planes.unpack()[..., c * self.bit_width + m]


@dataclass(frozen=True)
class BinaryWeightTensor:
    """Binary weights ``scale * (+1 | -1)``.

    ``signs`` is the row-major flattening of ``shape`` packed LSB-first; bit 1 means +1.
    Convolution kernels use shape ``(kh, kw, C_in, I)``; dense weights ``(D, I)``.
    """

    shape: tuple[int, ...]
    signs: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if self.scale < 0 or not np.isfinite(self.scale):
            raise ValueError("scale must be finite and nonnegative")
        size = int(np.prod(self.shape))
        if self.signs.shape != (n_words(size),):
            raise ValueError("sign bitmask length does not match shape")

    @classmethod
    def from_signs(cls, signs: np.ndarray, scale: float) -> "BinaryWeightTensor":
        """Build from a boolean/{0,1}/{-1,+1} array; positive entries map to +1."""
        s = np.asarray(signs)
        return cls(s.shape, pack_bits((s > 0).astype(np.uint8).ravel()), float(scale))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def positive(self) -> np.ndarray:
        return unpack_bits(self.signs, self.size).reshape(self.shape).astype(bool)

    def sign_array(self) -> np.ndarray:
        return np.where(self.positive(), 1, -1).astype(np.int8)

    def effective(self) -> np.ndarray:
        return self.scale * self.sign_array().astype(np.float64)

    @cached_property
    def conv_words(self) -> np.ndarray:
        """Signs of a ``(kh, kw, C_in, I)`` kernel repacked to ``(kh, kw, I, words(C_in))``."""
        if len(self.shape) != 4:
            raise ValueError("conv_words needs a rank-4 kernel")
        return pack_bits(np.moveaxis(self.positive(), 3, 2).astype(np.uint8))

    def __getitem__(self, idx) -> "BinaryWeightTensor":
        """Slice the sign array; the scale is shared by every slice."""
        sub = self.sign_array()[idx]
        return BinaryWeightTensor.from_signs(np.atleast_1d(sub), self.scale)


def to_fixed_point(raw, lo: float, hi: float, bit_width: int) -> FixedTensor:
    """Map ``[lo, hi]`` affinely onto ``0 .. 2**M - 1`` with saturation."""
    if not hi > lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    if not 1 <= bit_width <= MAX_BIT_WIDTH:
        raise ValueError(f"bit width must be in 1..{MAX_BIT_WIDTH}")
    raw = np.asarray(raw, dtype=np.float64)
    bad = ~np.isfinite(raw)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite input value {raw[first]} at index {first}")
    top = (1 << bit_width) - 1
    scaled = (raw - lo) / (hi - lo) * top
    q = np.clip(round_half_away(scaled), 0, top)
    return FixedTensor(q.astype(np.uint16), bit_width)


def decompose(t: FixedTensor) -> BitPlaneTensor:
    m = t.bit_width
    shifts = np.arange(m, dtype=np.uint16)
    # (..., C, M) -> (..., C*M), channel-major
    bits = (t.values[..., None] >> shifts) & 1
    bits = bits.reshape(t.shape[:-1] + (t.shape[-1] * m,)).astype(np.uint8)
    return BitPlaneTensor(tuple(t.shape), m, PackedBits(pack_bits(bits), bits.shape[-1]))


def recompose(b: BitPlaneTensor) -> FixedTensor:
    m = b.bit_width
    bits = b.planes.unpack().reshape(tuple(b.base_shape) + (m,)).astype(np.uint32)
    weights = (1 << np.arange(m, dtype=np.uint32))
    return FixedTensor((bits * weights).sum(axis=-1).astype(np.uint16), m)


def _as_packed(x) -> PackedBits:
    if isinstance(x, BitPlaneTensor):
        return x.planes
    if isinstance(x, PackedBits):
        return x
    return PackedBits.from_bits(np.asarray(x))


def binary_dot_01(x_bits, w: BinaryWeightTensor) -> float:
    """``sum_m x_m * w_m`` for x in {0,1} and w in {-a,+a}, via popcounts."""
    x = _as_packed(x_bits)
    if x.words.ndim != 1:
        raise ValueError("binary_dot_01 expects a 1-D bit vector")
    if x.channels != w.size:
        raise ValueError(f"length mismatch: {x.channels} input bits vs {w.size} weights")
    return w.scale * kernels.packed_dot(x.words, w.signs)
