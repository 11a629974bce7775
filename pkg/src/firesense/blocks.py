"""Composite layers: conv/batchnorm units, residual blocks, fusion, decoder.

Modules register parameters and buffers by attribute; iteration order is
attribute creation order, which is fixed per architecture, so parameter
naming and checkpoint layout are deterministic.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor

_MODES = ("train", "eval", "mc")


@dataclass
class ForwardContext:
    """Per-call forward state.

    mode: 'train' (batchnorm batch stats + dropout), 'eval' (running stats,
    no dropout), 'mc' (running stats, dropout active).
    rng: dropout noise source; required whenever dropout is active.
    alphas: when a list, every fusion gate appends its attention map (HxW).
    internals: when a dict, models stash named activations for inspection.
    """

    mode: str = "eval"
    rng: np.random.Generator | None = None
    alphas: list | None = None
    internals: dict | None = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigurationError(f"forward mode must be one of {_MODES}, got {self.mode!r}")

    @property
    def bn_training(self) -> bool:
        return self.mode == "train"

    @property
    def dropout_on(self) -> bool:
        return self.mode in ("train", "mc")


class Module:
    """Base class: recursive, ordered parameter/buffer discovery."""

    _buffer_names: tuple = ()

    def _children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _kaiming_uniform(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    # fan-in = cin*k*k, relu gain sqrt(2): bound = sqrt(6 / fan_in)
    bound = float(np.sqrt(6.0 / (cin * k * k)))
    return rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int,
                 stride: int = 1, padding: int | None = None):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.w = Tensor(_kaiming_uniform(rng, cout, cin, k), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           ctx.bn_training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3):
        self.conv = Conv2d(rng, cin, cout, k)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return T.relu(self.bn.forward(self.conv.forward(x), ctx))


class ResidualBlock(Module):
    """conv-BN-relu-conv-BN plus shortcut, relu after the sum.

    Spatial dims are preserved; the shortcut is a 1x1 conv + BN projection
    when channel counts differ, identity otherwise.
    """

    def __init__(self, rng, cin: int, cout: int, first_k: int = 3):
        self.conv1 = Conv2d(rng, cin, cout, first_k)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3)
        self.bn2 = BatchNorm2d(cout)
        if cin != cout:
            self.proj = Conv2d(rng, cin, cout, 1)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = T.relu(self.bn1.forward(self.conv1.forward(x), ctx))
        h = self.bn2.forward(self.conv2.forward(h), ctx)
        s = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x), ctx)
        return T.relu(h + s)


class Cafim(Module):
    """Spatial gate fusing two same-shape feature maps.

    alpha = sigmoid(conv3x3(relu(conv3x3(concat(proj_a(a), proj_b(b))))))
    (single channel); output = concat(alpha * a, (1 - alpha) * b).
    """

    def __init__(self, rng, c: int):
        self.proj_fuel = Conv2d(rng, c, c, 1)
        self.proj_weather = Conv2d(rng, c, c, 1)
        self.att_conv1 = Conv2d(rng, 2 * c, c, 3)
        self.att_conv2 = Conv2d(rng, c, 1, 3)

    def forward_with_alpha(self, fuel: Tensor, weather: Tensor) -> tuple[Tensor, Tensor]:
        cat = T.concat_channels(self.proj_fuel.forward(fuel), self.proj_weather.forward(weather))
        gate = T.relu(self.att_conv1.forward(cat))
        alpha = T.sigmoid(self.att_conv2.forward(gate))
        fused = T.concat_channels(fuel * alpha, weather * (1.0 - alpha))
        return fused, alpha


class ConcatFuse(Module):
    """Parameter-free drop-in for Cafim: plain channel concatenation."""

    def forward_with_alpha(self, fuel: Tensor, weather: Tensor) -> tuple[Tensor, None]:
        return T.concat_channels(fuel, weather), None


class DecoderBlock(Module):
    """2x bilinear upsample, concat skip, two 3x3 conv-BN-relu layers."""

    def __init__(self, rng, cin: int, c_skip: int, cout: int):
        self.conv1 = ConvBNReLU(rng, cin + c_skip, cout)
        self.conv2 = ConvBNReLU(rng, cout, cout)

    def forward(self, x: Tensor, skip: Tensor, ctx: ForwardContext) -> Tensor:
        up = T.bilinear_upsample2x(x)
        h = T.concat_channels(up, skip)
        return self.conv2.forward(self.conv1.forward(h, ctx), ctx)
