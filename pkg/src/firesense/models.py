"""The three segmentation architectures plus parameter/FLOP accounting.

All nets map a 12x64x64 input to 1x64x64 pre-sigmoid logits. The dual-branch
net splits channels into a fuel group (first 4) and a weather group (last 8),
encodes each at three scales, fuses per scale with a spatial attention gate,
and decodes with bilinear upsampling over the fused skip maps. Downsampling
between stages is 2x2 max pooling throughout (keeps every conv at stride 1
with exact 'same' padding).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    BatchNorm2d,
    Cafim,
    ConcatFuse,
    Conv2d,
    ConvBNReLU,
    DecoderBlock,
    ForwardContext,
    Module,
    ResidualBlock,
)
from .errors import ConfigurationError, ShapeMismatchError
from .rng import rng_for
from .tensor import Tensor

ARCHS = ("FireSenseNet", "BaselineCNN", "FireSenseNetConcat")

BRANCH_WIDTHS = (16, 32, 64)
BASELINE_WIDTHS = (32, 64, 128)
BOTTLENECK_WIDTH = 256
DECODER_WIDTHS = (128, 64, 32)


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "FireSenseNet"
    width_mult: float = 1.0
    dropout_p: float = 0.3
    in_channels: int = 12
    fuel_channels: int = 4

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.width_mult <= 0:
            raise ConfigurationError(f"width_mult must be positive, got {self.width_mult}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0 < self.fuel_channels < self.in_channels:
            raise ConfigurationError(
                f"fuel_channels must split in_channels, got {self.fuel_channels}/{self.in_channels}"
            )
        base = (BRANCH_WIDTHS if self.arch != "BaselineCNN" else BASELINE_WIDTHS)
        for c in (*base, BOTTLENECK_WIDTH, *DECODER_WIDTHS):
            _scaled(c, self.width_mult)


def _scaled(c: int, mult: float) -> int:
    v = c * mult
    r = round(v)
    if abs(v - r) > 1e-9 or r < 1:
        raise ConfigurationError(
            f"width_mult {mult} turns base width {c} into {v}; channel counts must be integers >= 1"
        )
    return int(r)


class FireSenseNet(Module):
    """Dual-branch encoder with per-scale gated fusion and a skip decoder."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig, fuse_factory=Cafim):
        m = config.width_mult
        c1, c2, c3 = (_scaled(c, m) for c in BRANCH_WIDTHS)
        cb = _scaled(BOTTLENECK_WIDTH, m)
        d1, d2, d3 = (_scaled(c, m) for c in DECODER_WIDTHS)
        cf = config.fuel_channels
        cw = config.in_channels - config.fuel_channels

        self.fuel1 = ResidualBlock(rng, cf, c1)
        self.fuel2 = ResidualBlock(rng, c1, c2)
        self.fuel3 = ResidualBlock(rng, c2, c3)
        # weather fields are spatially smoother: wider first kernel per stage
        self.weather1 = ResidualBlock(rng, cw, c1, first_k=5)
        self.weather2 = ResidualBlock(rng, c1, c2, first_k=5)
        self.weather3 = ResidualBlock(rng, c2, c3, first_k=5)
        self.fuse1 = fuse_factory(rng, c1)
        self.fuse2 = fuse_factory(rng, c2)
        self.fuse3 = fuse_factory(rng, c3)
        self.bott_conv = ConvBNReLU(rng, 2 * c3, cb)
        self.bott_res = ResidualBlock(rng, cb, cb)
        self.dec1 = DecoderBlock(rng, cb, 2 * c3, d1)
        self.dec2 = DecoderBlock(rng, d1, 2 * c2, d2)
        self.dec3 = DecoderBlock(rng, d2, 2 * c1, d3)
        self.head = Conv2d(rng, d3, 1, 1)
        self.config = config

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        cfg = self.config
        if x.data.ndim != 3 or x.data.shape[0] != cfg.in_channels:
            raise ShapeMismatchError(
                f"expected [{cfg.in_channels},H,W] input, got {x.data.shape}"
            )
        xf = T.slice_channels(x, 0, cfg.fuel_channels)
        xw = T.slice_channels(x, cfg.fuel_channels, cfg.in_channels)

        f1 = self.fuel1.forward(xf, ctx)
        w1 = self.weather1.forward(xw, ctx)
        fused1, a1 = self.fuse1.forward_with_alpha(f1, w1)
        f2 = self.fuel2.forward(T.maxpool2x2(f1), ctx)
        w2 = self.weather2.forward(T.maxpool2x2(w1), ctx)
        fused2, a2 = self.fuse2.forward_with_alpha(f2, w2)
        f3 = self.fuel3.forward(T.maxpool2x2(f2), ctx)
        w3 = self.weather3.forward(T.maxpool2x2(w2), ctx)
        fused3, a3 = self.fuse3.forward_with_alpha(f3, w3)

        if ctx.alphas is not None and a1 is not None:
            ctx.alphas.extend([a1, a2, a3])
        if ctx.internals is not None:
            for name, t in (("fuel1", f1), ("weather1", w1), ("fused1", fused1),
                            ("fuel2", f2), ("weather2", w2), ("fused2", fused2),
                            ("fuel3", f3), ("weather3", w3), ("fused3", fused3)):
                ctx.internals[name] = np.array(t.data)

        b = T.maxpool2x2(fused3)
        b = self.bott_conv.forward(b, ctx)
        b = self.bott_res.forward(b, ctx)
        h = self.dec1.forward(b, fused3, ctx)
        h = self.dec2.forward(h, fused2, ctx)
        h = self.dec3.forward(h, fused1, ctx)
        h = T.dropout(h, cfg.dropout_p, ctx.rng, ctx.dropout_on)
        return self.head.forward(h)


class BaselineCNN(Module):
    """Single-stream encoder-decoder over all 12 channels, no fusion gate."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        m = config.width_mult
        c1, c2, c3 = (_scaled(c, m) for c in BASELINE_WIDTHS)
        cb = _scaled(BOTTLENECK_WIDTH, m)
        d1, d2, d3 = (_scaled(c, m) for c in DECODER_WIDTHS)

        self.stage1 = [ConvBNReLU(rng, config.in_channels, c1), ConvBNReLU(rng, c1, c1)]
        self.stage2 = [ConvBNReLU(rng, c1, c2), ConvBNReLU(rng, c2, c2)]
        self.stage3 = [ConvBNReLU(rng, c2, c3), ConvBNReLU(rng, c3, c3)]
        self.bott1 = ConvBNReLU(rng, c3, cb)
        self.bott2 = ConvBNReLU(rng, cb, cb)
        self.dec1 = DecoderBlock(rng, cb, c3, d1)
        self.dec2 = DecoderBlock(rng, d1, c2, d2)
        self.dec3 = DecoderBlock(rng, d2, c1, d3)
        self.head = Conv2d(rng, d3, 1, 1)
        self.config = config

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        cfg = self.config
        if x.data.ndim != 3 or x.data.shape[0] != cfg.in_channels:
            raise ShapeMismatchError(
                f"expected [{cfg.in_channels},H,W] input, got {x.data.shape}"
            )
        s1 = self.stage1[1].forward(self.stage1[0].forward(x, ctx), ctx)
        s2 = self.stage2[1].forward(self.stage2[0].forward(T.maxpool2x2(s1), ctx), ctx)
        s3 = self.stage3[1].forward(self.stage3[0].forward(T.maxpool2x2(s2), ctx), ctx)
        b = self.bott2.forward(self.bott1.forward(T.maxpool2x2(s3), ctx), ctx)
        h = self.dec1.forward(b, s3, ctx)
        h = self.dec2.forward(h, s2, ctx)
        h = self.dec3.forward(h, s1, ctx)
        h = T.dropout(h, cfg.dropout_p, ctx.rng, ctx.dropout_on)
        return self.head.forward(h)


def build(config: ModelConfig, seed: int) -> Module:
    """Construct the configured architecture with seeded initialization."""
    config.validate()
    rng = rng_for(seed, "init")
    if config.arch == "FireSenseNet":
        return FireSenseNet(rng, config, fuse_factory=Cafim)
    if config.arch == "FireSenseNetConcat":
        return FireSenseNet(rng, config, fuse_factory=lambda _rng, _c: ConcatFuse())
    return BaselineCNN(rng, config)


def forward(model: Module, x, mode: str = "eval", rng: np.random.Generator | None = None,
            want_alphas: bool = False):
    """Run the net on one sample; returns logits (and the gate maps if asked)."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    ctx = ForwardContext(mode=mode, rng=rng, alphas=[] if want_alphas else None)
    out = model.forward(xt, ctx)
    if want_alphas:
        return out, ctx.alphas
    return out


def count_params(model: Module) -> tuple[list[tuple[str, int]], int]:
    """Per-layer parameter table (grouped by owning submodule) plus total."""
    groups: dict[str, int] = {}
    total = 0
    for name, p in model.named_parameters():
        layer = name.rsplit(".", 1)[0] if "." in name else name
        groups[layer] = groups.get(layer, 0) + p.data.size
        total += p.data.size
    return list(groups.items()), total


def count_flops(model: Module, height: int = 64, width: int = 64) -> tuple[list, int]:
    """Per-op FLOP table for one forward pass on a height x width input.

    Conventions (documented in cost_counter): 1 MAC = 2 FLOPs, conv cost
    2*k^2*Cin*Cout*H'*W' with bias free, elementwise/batchnorm/pool = output
    size, bilinear upsample = 8 * output size, concat/slice/dropout free.
    """
    cfg = getattr(model, "config", None)
    cin = cfg.in_channels if cfg is not None else 12
    x = Tensor(np.zeros((cin, height, width), dtype=np.float32))
    with T.no_grad(), T.cost_counter() as records:
        model.forward(x, ForwardContext(mode="eval"))
    rows = [(f"{kind}#{i}", flops, shape) for i, (kind, flops, shape) in enumerate(records)]
    return rows, sum(r[1] for r in rows)
