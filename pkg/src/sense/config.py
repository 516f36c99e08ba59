"""Model configuration, size profiles and the convolution-stack layout."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .numcore.functional import conv_out_len


@dataclass(frozen=True)
class ConvLayer:
    """One row of the waveform convolution stack.

    ``kind`` is one of ``conv1d``, ``conv2d``, ``flatten`` or ``maxpool``.
    Before ``flatten`` the activations are (time, component, channels) and a
    ``conv1d`` runs along time for each component with shared filters; the
    ``conv2d`` spans (time, component). After ``flatten`` the component axis
    has been folded into channels and everything is a plain 1-D sequence.
    """

    kind: str
    filters: int = 0
    kernel: tuple[int, ...] = ()
    stride: tuple[int, ...] = ()

    def label(self, index: int) -> str:
        if self.kind == "flatten":
            return f"layer {index} (flatten)"
        k = "x".join(map(str, self.kernel))
        s = "x".join(map(str, self.stride))
        return f"layer {index} ({self.kind}, {self.filters or '-'} filters, kernel {k}, stride {s})"


FULL_STACK: tuple[ConvLayer, ...] = (
    ConvLayer("conv1d", 8, (5,), (5,)),
    ConvLayer("conv2d", 32, (16, 3), (1, 3)),
    ConvLayer("flatten"),
    ConvLayer("conv1d", 64, (16,), (5,)),
    ConvLayer("maxpool", 0, (2,), (2,)),
    ConvLayer("conv1d", 128, (16,), (1,)),
    ConvLayer("maxpool", 0, (2,), (2,)),
    ConvLayer("conv1d", 32, (8,), (1,)),
    ConvLayer("maxpool", 0, (2,), (2,)),
    ConvLayer("conv1d", 32, (8,), (1,)),
    ConvLayer("conv1d", 16, (4,), (1,)),
)

# Same layer sequence at reduced width and kernel size, for short windows.
TINY_STACK: tuple[ConvLayer, ...] = (
    ConvLayer("conv1d", 4, (5,), (5,)),
    ConvLayer("conv2d", 8, (8, 3), (1, 3)),
    ConvLayer("flatten"),
    ConvLayer("conv1d", 8, (8,), (3,)),
    ConvLayer("maxpool", 0, (2,), (2,)),
    ConvLayer("conv1d", 8, (4,), (1,)),
    ConvLayer("maxpool", 0, (2,), (2,)),
    ConvLayer("conv1d", 8, (3,), (1,)),
    ConvLayer("conv1d", 4, (2,), (1,)),
)


def trace_conv_shapes(stack, window_samples: int) -> list[tuple[int, ...]]:
    """Per-layer output shapes (without batch) for a 3-component input.

    Raises ``ValueError`` naming the first layer whose input is shorter than
    its kernel.
    """
    shape: tuple[int, ...] = (window_samples, 3, 1)
    flat = False
    shapes = []
    for i, layer in enumerate(stack):
        if layer.kind == "flatten":
            if flat:
                raise ValueError(f"{layer.label(i)}: already flat")
            L, W, C = shape
            shape = (L, W * C)
            flat = True
        elif layer.kind == "conv2d":
            if flat:
                raise ValueError(f"{layer.label(i)}: conv2d after flatten")
            L, W, C = shape
            (kh, kw), (sh, sw) = layer.kernel, layer.stride
            if L < kh or W < kw:
                raise ValueError(f"window of {window_samples} samples too short at {layer.label(i)}: input {shape[:2]}")
            shape = (conv_out_len(L, kh, sh), conv_out_len(W, kw, sw), layer.filters)
        elif layer.kind in ("conv1d", "maxpool"):
            (k,), (s,) = layer.kernel, layer.stride
            L = shape[0]
            if L < k:
                raise ValueError(f"window of {window_samples} samples too short at {layer.label(i)}: input length {L}")
            out_len = conv_out_len(L, k, s)
            channels = layer.filters if layer.kind == "conv1d" else shape[-1]
            shape = (out_len, channels) if flat else (out_len, shape[1], channels)
        else:
            raise ValueError(f"unknown conv layer kind {layer.kind!r}")
        shapes.append(shape)
    if not flat:
        raise ValueError("conv stack must contain a flatten layer")
    return shapes


def conv_output_size(stack, window_samples: int) -> int:
    L, C = trace_conv_shapes(stack, window_samples)[-1]
    return L * C


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 8
    ffn_hidden: int = 256
    n_blocks: int = 2
    n_stations: int = 16
    window_samples: int = 4000
    n_levels: int = 5
    n_mixtures: int = 3
    block_kind: str = "transformer"
    head_kind: str = "continuous"
    conv_stack: tuple[ConvLayer, ...] = FULL_STACK
    discrete_hidden: tuple[int, ...] = (500, 150, 100, 50, 30)
    continuous_hidden: tuple[int, ...] = (500, 150, 100, 50, 30, 10)
    conformer_kernel: int = 7
    sample_rate: float = 100.0
    input_scale: float = 0.1
    sigma_floor: float = 1e-2
    pe_lonlat_range: tuple[float, float] = (0.01, 10.0)
    pe_height_range: tuple[float, float] = (1.0, 1000.0)
    thresholds: tuple[float, ...] = field(default=(0.81, 2.5, 8.1, 14.0, 25.0))

    def __post_init__(self):
        self.validate()

    @property
    def window_seconds(self) -> float:
        return self.window_samples / self.sample_rate

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.d_model < 6 or self.d_model % 2:
            raise ValueError(f"d_model must be even and >= 6, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.n_levels < 1 or self.n_mixtures < 1 or self.n_stations < 1:
            raise ValueError("n_levels, n_mixtures and n_stations must be >= 1")
        if len(self.thresholds) != self.n_levels:
            raise ValueError(f"{len(self.thresholds)} thresholds for {self.n_levels} levels")
        if list(self.thresholds) != sorted(set(self.thresholds)):
            raise ValueError("thresholds must be strictly ascending")
        if self.block_kind not in ("transformer", "conformer"):
            raise ValueError(f"block_kind must be transformer or conformer, got {self.block_kind!r}")
        if self.head_kind not in ("discrete", "continuous"):
            raise ValueError(f"head_kind must be discrete or continuous, got {self.head_kind!r}")
        if self.conformer_kernel % 2 == 0:
            raise ValueError("conformer_kernel must be odd")
        trace_conv_shapes(self.conv_stack, self.window_samples)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_stack"] = [
            {"kind": l.kind, "filters": l.filters, "kernel": list(l.kernel), "stride": list(l.stride)}
            for l in self.conv_stack
        ]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "conv_stack" in d:
            stack = d["conv_stack"]
            if isinstance(stack, str):
                d["conv_stack"] = CONV_STACKS[stack]
            else:
                d["conv_stack"] = tuple(
                    l if isinstance(l, ConvLayer)
                    else ConvLayer(l["kind"], int(l.get("filters", 0)), tuple(l.get("kernel", ())), tuple(l.get("stride", ())))
                    for l in stack
                )
        for k in ("discrete_hidden", "continuous_hidden", "pe_lonlat_range", "pe_height_range", "thresholds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


CONV_STACKS = {"full": FULL_STACK, "tiny": TINY_STACK}


def profile(name: str, **overrides) -> ModelConfig:
    """Named size presets.

    ``full``: 6 blocks of width 500, 10 heads, FFN 1000, 120 s windows.
    ``desk``: width 128, 8 heads, 2 blocks, K=3, 40 s windows (the shortest
    round window the full stack accepts at 100 Hz without padding).
    ``tiny``: width 32 on 5 s windows with the reduced stack, for gradient checks.
    """
    presets = {
        "full": dict(d_model=500, n_heads=10, ffn_hidden=1000, n_blocks=6, window_samples=12000,
                      n_mixtures=5, conv_stack=FULL_STACK),
        "desk": dict(d_model=128, n_heads=8, ffn_hidden=256, n_blocks=2, window_samples=4000,
                     n_mixtures=3, conv_stack=FULL_STACK),
        "tiny": dict(d_model=32, n_heads=4, ffn_hidden=64, n_blocks=1, n_stations=4, window_samples=500,
                     n_mixtures=2, conv_stack=TINY_STACK),
    }
    if name not in presets:
        raise ValueError(f"unknown model profile {name!r}; choose from {sorted(presets)}")
    return ModelConfig(**{**presets[name], **overrides})
