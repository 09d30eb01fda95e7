"""Network assembled from a :class:`ModelConfig`, with a training graph and a
packed-kernel inference path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .bitplane import BitPlaneTensor, FixedTensor, PackedBits, decompose, pack_bits
from .dsl import FC, Conv, MaxPool, ModelConfig
from .layers import (BilSpec, BNState, batch_norm_inference, bil_first_layer, binary_activation,
                     conv2d_binary, conv2d_reference, dbi_first_layer, fpid_first_layer, max_pool)
from .quantizers import binarize_weights


def prepare_input(x: np.ndarray, mode: str, bit_width: int, dtype=np.float32) -> np.ndarray:
    """Float view of M-bit integer inputs as seen by each first-layer strategy."""
    x = np.asarray(x)
    if mode == "baseline":
        return (x / ((1 << bit_width) - 1)).astype(dtype)
    if mode == "fpid":
        return x.astype(dtype)
    shifts = np.arange(bit_width, dtype=np.uint16)
    bits = (x.astype(np.uint16)[..., None] >> shifts) & 1
    return bits.reshape(x.shape[:-1] + (x.shape[-1] * bit_width,)).astype(dtype)


@dataclass
class Stage:
    kind: str  # bil | conv | pool | fc | head
    weight: ag.Tensor | None = None
    bias: ag.Tensor | None = None
    gamma: ag.Tensor | None = None
    beta: ag.Tensor | None = None
    bn: BNState | None = None
    binary: bool = True
    window: tuple[int, int] = (1, 1)
    dropout_before: bool = False


class Network:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32, quantize: bool = True):
        self.cfg = cfg
        self.dtype = dtype
        self.quantize = quantize
        rng = np.random.default_rng(seed)
        self.stages: list[Stage] = []
        h, w, c = cfg.input_shape
        mode = cfg.first_layer_mode
        if mode in ("dbi", "bil"):
            c = c * cfg.M
        if mode == "bil":
            self.stages.append(self._weighted("bil", rng, (1, 1, c, cfg.K), binary=True))
            c = cfg.K
        first_fc = next((i for i, layer in enumerate(cfg.layers) if isinstance(layer, FC)), None)
        head_index = len(cfg.layers) - 1
        flat = None
        for i, layer in enumerate(cfg.layers):
            if isinstance(layer, Conv):
                kh, kw = cfg.kernel(layer.size)
                first = not any(s.kind == "conv" for s in self.stages)
                binary = not (first and mode == "baseline")
                self.stages.append(self._weighted("conv", rng, (kh, kw, c, layer.filters), binary))
                c = layer.filters
            elif isinstance(layer, MaxPool):
                window = cfg.kernel(layer.size)
                self.stages.append(Stage("pool", window=window))
                h, w = h // window[0], w // window[1]
            elif isinstance(layer, FC):
                d = flat if flat is not None else h * w * c
                st = self._weighted("fc", rng, (d, layer.units), binary=True)
                st.dropout_before = i == first_fc
                self.stages.append(st)
                flat = layer.units
            else:
                d = flat if flat is not None else h * w * c
                bound = 1.0 / np.sqrt(d)
                st = Stage("head", binary=False,
                           weight=ag.param(rng.uniform(-bound, bound, (d, cfg.num_classes)).astype(dtype), "head.w"),
                           bias=ag.param(np.zeros(cfg.num_classes, dtype), "head.b"))
                st.dropout_before = first_fc is None and i == head_index
                self.stages.append(st)

    def _weighted(self, kind, rng, shape, binary) -> Stage:
        fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / np.sqrt(fan_in)
        n = shape[-1]
        idx = len(self.stages)
        return Stage(
            kind,
            weight=ag.param(rng.uniform(-bound, bound, shape).astype(self.dtype), f"{idx}.{kind}.w"),
            gamma=ag.param(np.ones(n, self.dtype), f"{idx}.{kind}.gamma"),
            beta=ag.param(np.zeros(n, self.dtype), f"{idx}.{kind}.beta"),
            bn=BNState.identity(n, self.dtype),
            binary=binary,
        )

    def parameters(self) -> list[ag.Tensor]:
        out = []
        for st in self.stages:
            out += [t for t in (st.weight, st.bias, st.gamma, st.beta) if t is not None]
        return out

    # -- training graph -------------------------------------------------

    def forward(self, x_int: np.ndarray, training: bool = False, rng: np.random.Generator | None = None,
                inputs: np.ndarray | None = None, dropout: bool = True) -> ag.Tensor:
        """Logits for a batch of M-bit integer inputs ``(N, H, W, C)``.

        ``inputs`` overrides the prepared float input (used for gradient checks).
        """
        cfg = self.cfg
        if inputs is None:
            inputs = prepare_input(x_int, cfg.first_layer_mode, cfg.M, self.dtype)
        a = ag.Tensor(inputs)
        for st in self.stages:
            if st.kind == "pool":
                a = ag.max_pool(a, st.window)
                continue
            if st.dropout_before and dropout:
                a = ag.dropout(a, cfg.dropout, rng, training)
            w = ag.binarize(st.weight) if (st.binary and self.quantize) else st.weight
            if st.kind in ("conv", "bil"):
                a = ag.conv2d(a, w)
            else:
                if a.data.ndim > 2:
                    a = ag.flatten(a)
                a = ag.linear(a, w, st.bias)
                if st.kind == "head":
                    return a
            a = ag.batch_norm(a, st.gamma, st.beta, st.bn, training)
            a = ag.activation(a, quantize=self.quantize)
        raise AssertionError("network has no head")

    def recalibrate_bn(self, x_int: np.ndarray) -> None:
        """Reset every running BN statistic to the population statistics of ``x_int``
        under the current weights (dropout off)."""
        saved = [(st.bn, st.bn.momentum) for st in self.stages if st.bn is not None]
        for bn, _ in saved:
            bn.momentum = 0.0
        try:
            self.forward(x_int, training=True, rng=None, dropout=False)
        finally:
            for bn, m in saved:
                bn.momentum = m

    # -- packed inference ----------------------------------------------

    def predict_packed(self, x_int: np.ndarray) -> np.ndarray:
        """Inference logits using the popcount kernels for every binary layer.

        Requires 1-bit activations (``quantize=True``).
        """
        if not self.quantize:
            raise ValueError("packed inference needs the quantized network")
        cfg = self.cfg
        x_int = np.asarray(x_int)
        fixed = FixedTensor(x_int.astype(np.uint16), cfg.M)
        a = None  # {0,1} activations as uint8, or PackedBits
        first_conv_done = False
        for st in self.stages:
            if st.kind == "pool":
                a = max_pool(_unpacked(a), st.window)
                continue
            if st.kind == "head":
                flat = _unpacked(a).reshape(len(x_int), -1).astype(np.float64)
                return flat @ st.weight.data.astype(np.float64) + st.bias.data
            bn = _bn64(st)
            if st.kind == "bil":
                bw = binarize_weights(st.weight.data)
                a = bil_first_layer(decompose(fixed), BilSpec(cfg.K), bw, bn)
                continue
            if st.kind == "conv":
                if not first_conv_done and cfg.first_layer_mode != "bil":
                    s = self._first_layer(fixed, st)
                else:
                    s = conv2d_binary(_packed(a), binarize_weights(st.weight.data))
                first_conv_done = True
            else:
                flat = _unpacked(a).reshape(len(x_int), 1, 1, -1)
                bw = binarize_weights(st.weight.data[None, None])
                s = conv2d_binary(flat, bw)[:, 0, 0]
            a = binary_activation(batch_norm_inference(s, bn)).astype(np.uint8)
        raise AssertionError("network has no head")

    def _first_layer(self, fixed: FixedTensor, st: Stage) -> np.ndarray:
        mode = self.cfg.first_layer_mode
        if mode == "baseline":
            x = prepare_input(fixed.values, "baseline", fixed.bit_width, np.float64)
            return conv2d_reference(x, st.weight.data)
        bw = binarize_weights(st.weight.data)
        if mode == "fpid":
            return fpid_first_layer(fixed, bw)
        return dbi_first_layer(decompose(fixed), bw)

    def predict(self, x_int: np.ndarray, packed: bool = False, batch_size: int = 512) -> np.ndarray:
        """Predicted class ids."""
        out = []
        for i in range(0, len(x_int), batch_size):
            xb = x_int[i:i + batch_size]
            logits = self.predict_packed(xb) if packed else self.forward(xb).data
            out.append(np.argmax(logits, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- state ----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, st in enumerate(self.stages):
            for name in ("weight", "bias", "gamma", "beta"):
                t = getattr(st, name)
                if t is not None:
                    state[f"{i}.{st.kind}.{name}"] = t.data
            if st.bn is not None:
                state[f"{i}.{st.kind}.running_mean"] = st.bn.running_mean
                state[f"{i}.{st.kind}.running_var"] = st.bn.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            raise ValueError(f"checkpoint keys do not match model: {sorted(set(own) ^ set(state))}")
        for i, st in enumerate(self.stages):
            for name in ("weight", "bias", "gamma", "beta"):
                t = getattr(st, name)
                if t is not None:
                    t.data = _match(state[f"{i}.{st.kind}.{name}"], t.data)
            if st.bn is not None:
                st.bn.running_mean = _match(state[f"{i}.{st.kind}.running_mean"], st.bn.running_mean)
                st.bn.running_var = _match(state[f"{i}.{st.kind}.running_var"], st.bn.running_var)


def _match(new: np.ndarray, old: np.ndarray) -> np.ndarray:
    if new.shape != old.shape:
        raise ValueError(f"shape mismatch {new.shape} vs {old.shape}")
    return np.array(new, dtype=old.dtype)


def _bn64(st: Stage) -> BNState:
    return BNState(st.gamma.data.astype(np.float64), st.beta.data.astype(np.float64),
                   st.bn.running_mean.astype(np.float64), st.bn.running_var.astype(np.float64),
                   st.bn.eps)


def _unpacked(a) -> np.ndarray:
    return a.unpack() if isinstance(a, (PackedBits, BitPlaneTensor)) else a


def _packed(a) -> PackedBits:
    if isinstance(a, PackedBits):
        return a
    return PackedBits(pack_bits(a), a.shape[-1])
