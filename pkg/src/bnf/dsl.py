"""Architecture strings such as ``24-C3+MP2+32-C3+MP2+FC256+Softmax``.

Grammar (whitespace ignored, ``+`` or ``-`` between layers)::

    layer := INT "-C" INT        convolution, filters and kernel size
           | INT "-FC" | "FC" INT fully connected
           | "MP" INT             max pooling
           | "Softmax"            classifier head
           | INT ("x"|"×") "(" layers ")"   repetition
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

MODES = ("baseline", "fpid", "dbi", "bil")
AXIS_POLICIES = ("full_2d", "time_only")


class ArchitectureError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Conv:
    filters: int
    size: int


@dataclass(frozen=True)
class MaxPool:
    size: int


@dataclass(frozen=True)
class FC:
    units: int


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Conv | MaxPool | FC | Softmax


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self, s: str) -> bool:
        self.skip_ws()
        return self.text.startswith(s, self.pos)

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def expect(self, s: str):
        if not self.peek(s):
            raise ArchitectureError(f"expected {s!r}", self.pos)
        self.pos += len(s)

    def integer(self, what: str) -> int:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if start == self.pos:
            raise ArchitectureError(f"expected {what}", start)
        value = int(self.text[start:self.pos])
        if value < 1:
            raise ArchitectureError(f"{what} must be positive", start)
        return value

    def sequence(self, closing: str | None) -> list[Layer]:
        layers = self.item()
        while True:
            if self.at_end() or (closing and self.peek(closing)):
                return layers
            if self.peek("+") or self.peek("-"):
                self.pos += 1
            else:
                raise ArchitectureError("expected '+' or '-' between layers", self.pos)
            layers += self.item()

    def item(self) -> list[Layer]:
        self.skip_ws()
        start = self.pos
        if self.peek("MP"):
            self.pos += 2
            return [MaxPool(self.integer("pool size"))]
        if self.peek("FC"):
            self.pos += 2
            return [FC(self.integer("unit count"))]
        if self.peek("Softmax"):
            self.pos += len("Softmax")
            return [Softmax()]
        if start < len(self.text) and self.text[start].isdigit():
            count = self.integer("count")
            if self.peek("-C"):
                self.pos += 2
                return [Conv(count, self.integer("kernel size"))]
            if self.peek("-FC"):
                self.pos += 3
                return [FC(count)]
            if self.peek("x") or self.peek("X") or self.peek("×"):
                self.pos += 1
                self.expect("(")
                body = self.sequence(closing=")")
                self.expect(")")
                if any(isinstance(b, Softmax) for b in body):
                    raise ArchitectureError("Softmax inside a repetition", start)
                return body * count
            raise ArchitectureError("expected '-C', '-FC' or 'x(' after a number", self.pos)
        raise ArchitectureError("unknown layer token", start)


def parse_architecture(text: str) -> list[Layer]:
    if not text or not text.strip():
        raise ArchitectureError("empty architecture string", 0)
    parser = _Parser(text)
    layers = parser.sequence(closing=None)
    heads = [i for i, layer in enumerate(layers) if isinstance(layer, Softmax)]
    if not heads:
        raise ArchitectureError("missing Softmax head", len(text))
    if heads != [len(layers) - 1]:
        raise ArchitectureError("Softmax must appear once, as the last layer", text.find("Softmax"))
    return layers


def render(layers) -> str:
    parts = []
    for layer in layers:
        if isinstance(layer, Conv):
            parts.append(f"{layer.filters}-C{layer.size}")
        elif isinstance(layer, MaxPool):
            parts.append(f"MP{layer.size}")
        elif isinstance(layer, FC):
            parts.append(f"FC{layer.units}")
        else:
            parts.append("Softmax")
    return "+".join(parts)


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple
    first_layer_mode: str = "baseline"
    K: int | None = None
    M: int = 8
    input_shape: tuple[int, int, int] = (1, 1, 1)
    conv_axis_policy: str = "full_2d"
    num_classes: int = 2
    dropout: float = 0.5
    arch: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.validate()

    @property
    def n(self) -> int:
        return sum(isinstance(layer, Conv) for layer in self.layers)

    @property
    def weighted_layers(self) -> int:
        return sum(isinstance(layer, (Conv, FC)) for layer in self.layers)

    def kernel(self, size: int) -> tuple[int, int]:
        return (1, size) if self.conv_axis_policy == "time_only" else (size, size)

    def validate(self) -> "ModelConfig":
        if self.first_layer_mode not in MODES:
            raise ValueError(f"unknown first-layer mode {self.first_layer_mode!r}")
        if self.conv_axis_policy not in AXIS_POLICIES:
            raise ValueError(f"unknown axis policy {self.conv_axis_policy!r}")
        if self.first_layer_mode == "bil":
            if self.K is None:
                raise ValueError("K required for bil")
            if self.K < 1:
                raise ValueError("K must be >= 1")
        elif self.K is not None:
            raise ValueError(f"K only applies to bil, not {self.first_layer_mode}")
        if not 1 <= self.M <= 16:
            raise ValueError("M must be in 1..16")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be three positive dims (H, W, C)")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ValueError("model must end in a Softmax head")
        if sum(isinstance(layer, Softmax) for layer in self.layers) != 1:
            raise ValueError("exactly one Softmax head allowed")
        if not isinstance(self.layers[0], Conv):
            raise ValueError("first layer must be a convolution")
        h, w, _ = self.input_shape
        flat = False
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Conv, MaxPool)) and flat:
                raise ValueError(f"layer {i} ({render([layer])}) follows a fully connected layer")
            if isinstance(layer, MaxPool):
                ph, pw = self.kernel(layer.size)
                if ph > h or pw > w:
                    raise ValueError(f"pool window {ph}x{pw} larger than {h}x{w} input at layer {i}")
                h, w = h // ph, w // pw
            elif isinstance(layer, FC):
                flat = True
        return self

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer, excluding the batch axis."""
        h, w, c = self.input_shape
        if self.first_layer_mode == "bil":
            c = self.K
        out, flat = [], None
        for layer in self.layers:
            if isinstance(layer, Conv):
                c = layer.filters
                out.append((h, w, c))
            elif isinstance(layer, MaxPool):
                ph, pw = self.kernel(layer.size)
                h, w = h // ph, w // pw
                out.append((h, w, c))
            elif isinstance(layer, FC):
                flat = layer.units
                out.append((flat,))
            else:
                out.append((self.num_classes,))
        return out

    def to_dict(self) -> dict:
        return {
            "arch": render(self.layers),
            "first_layer_mode": self.first_layer_mode,
            "K": self.K,
            "M": self.M,
            "input_shape": list(self.input_shape),
            "conv_axis_policy": self.conv_axis_policy,
            "num_classes": self.num_classes,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            layers=parse_architecture(d["arch"]),
            first_layer_mode=d["first_layer_mode"],
            K=d.get("K"),
            M=d.get("M", 8),
            input_shape=tuple(d["input_shape"]),
            conv_axis_policy=d.get("conv_axis_policy", "full_2d"),
            num_classes=d["num_classes"],
            dropout=d.get("dropout", 0.5),
            arch=d["arch"],
        )


PRESET_STRINGS = {
    "pamap2": "24-C3+MP2+32-C3+MP2+64-C64+MP2+FC256+Softmax",
    "svhn": "48-C5+MP2-2x(64-C3)-MP2-3x(128-C3)-FC512-Softmax",
    "cifar10": "2×(128-C3)+MP2 + 2×(256-C3) + MP2 + 2×(512-C3) + MP2 + 1024-FC + Softmax",
}

_PRESET_META = {
    "pamap2": dict(input_shape=(7, 100, 1), conv_axis_policy="time_only", num_classes=7),
    "svhn": dict(input_shape=(40, 40, 3), conv_axis_policy="full_2d", num_classes=10),
    "cifar10": dict(input_shape=(32, 32, 3), conv_axis_policy="full_2d", num_classes=10),
}


def _fix_pamap2(layers: list[Layer]) -> list[Layer]:
    fixed = []
    for layer in layers:
        if isinstance(layer, Conv) and layer.size == 64:
            log.warning("reading '%d-C64' as '%d-C3' in the pamap2 architecture",
                        layer.filters, layer.filters)
            layer = Conv(layer.filters, 3)
        fixed.append(layer)
    return fixed


def preset(name: str, mode: str = "baseline", K: int | None = None, M: int = 8, **overrides) -> ModelConfig:
    if name not in PRESET_STRINGS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_STRINGS)}")
    layers = parse_architecture(PRESET_STRINGS[name])
    if name == "pamap2":
        layers = _fix_pamap2(layers)
    meta = {**_PRESET_META[name], **overrides}
    return ModelConfig(layers=layers, first_layer_mode=mode, K=K, M=M, arch=render(layers), **meta)
