"""Survival regressor: 4 conv stages, global pooling, 3 dense layers.

Treatment enters in one of three ways, selected by ``fusion``:

* ``none``   - ignored; the backbone alone.
* ``concat`` - its one-hot code is appended to the pooled features that feed
  the first dense layer.
* ``adain``  - a mapping network turns it into a latent code that drives an
  AdaIN layer after every convolution (conv -> AdaIN -> ReLU -> max-pool).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from .conditioning import (
    LATENT_WIDTH,
    N_TREATMENTS,
    AffineSpecializer,
    MappingNetwork,
    adain,
    onehot_matrix,
)
from .exceptions import ConfigError, ShapeError
from .tensor import (
    Tensor,
    UnfoldedVolumes,
    concat,
    conv3d,
    conv3d_unfolded,
    conv_output_extent,
    flatten,
    global_avg_pool,
    linear,
    maxpool3d,
    relu,
)

FUSION_MODES = ("none", "concat", "adain")
N_CONV = 4
N_FC = 3
SURVIVAL_RANGE = (5.0, 1767.0)


@dataclass
class SurvivalNetConfig:
    in_channels: int = 5
    conv_channels: tuple = (8, 16, 32, 64)
    fc_widths: tuple = (64, 32, 1)
    fusion: str = "adain"
    latent_width: int = LATENT_WIDTH
    input_extent: int = 16
    seed: int = 0
    kernel_size: int = 3
    # prediction = output_offset + output_scale * head(x); both in days
    output_offset: float = 0.0
    output_scale: float = 1.0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.fc_widths = tuple(int(w) for w in self.fc_widths)

    def validate(self) -> "SurvivalNetConfig":
        if self.in_channels not in (4, 5):
            raise ConfigError(f"in_channels must be 4 or 5, got {self.in_channels}")
        if len(self.conv_channels) != N_CONV or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels must list {N_CONV} positive ints, got {self.conv_channels}")
        if len(self.fc_widths) != N_FC or self.fc_widths[-1] != 1 or min(self.fc_widths) < 1:
            raise ConfigError(f"fc_widths must list {N_FC} positive ints ending in 1, got {self.fc_widths}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.latent_width < 1:
            raise ConfigError(f"latent_width must be positive, got {self.latent_width}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not self.output_scale > 0:
            raise ConfigError(f"output_scale must be positive, got {self.output_scale}")
        extent = self.input_extent
        for stage in range(N_CONV):
            extent = conv_output_extent(extent, self.kernel_size, 1, self.kernel_size // 2)
            if extent < 2 or extent % 2:
                raise ConfigError(
                    f"input_extent {self.input_extent} leaves extent {extent} before max-pool stage {stage}; "
                    "each stage needs an even extent")
            extent //= 2
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SurvivalNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


@dataclass
class SurvivalNet:
    config: SurvivalNetConfig
    convs: list = field(default_factory=list)
    fcs: list = field(default_factory=list)
    mapping: MappingNetwork | None = None
    affine: AffineSpecializer | None = None

    def named_parameters(self) -> Iterator[tuple]:
        for i, (w, b) in enumerate(self.convs):
            yield f"conv{i}.weight", w
            yield f"conv{i}.bias", b
        for i, (w, b) in enumerate(self.fcs):
            yield f"fc{i}.weight", w
            yield f"fc{i}.bias", b
        if self.mapping is not None:
            yield from self.mapping.named_parameters()
            yield from self.affine.named_parameters()

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, volume, treatments=None) -> Tensor:
        return forward(self, volume, treatments)


def build(config: SurvivalNetConfig) -> SurvivalNet:
    """Seeded initialization; the same config always yields identical weights."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    net = SurvivalNet(config=config)
    cin = config.in_channels
    for cout in config.conv_channels:
        fan_in = cin * k ** 3
        net.convs.append((_he(rng, (cout, cin, k, k, k), fan_in), Tensor(np.zeros(cout), requires_grad=True)))
        cin = cout
    fan_in = first_fc_width(config)
    for width in config.fc_widths:
        net.fcs.append((_he(rng, (width, fan_in), fan_in), Tensor(np.zeros(width), requires_grad=True)))
        fan_in = width
    if config.fusion == "adain":
        net.mapping = MappingNetwork(rng, width=config.latent_width)
        net.affine = AffineSpecializer(rng, config.conv_channels, latent_width=config.latent_width)
    return net


def first_fc_width(config: SurvivalNetConfig) -> int:
    extra = N_TREATMENTS if config.fusion == "concat" else 0
    return config.conv_channels[-1] + extra


def _as_volume(volume) -> Tensor:
    t = volume if isinstance(volume, Tensor) else Tensor(volume)
    if t.ndim == 4:
        t = Tensor(t.data[None])
    return t


def forward(net: SurvivalNet, volume, treatments=None) -> Tensor:
    """Predicted survival days, shape ``[N, 1]``.

    ``treatments`` may be a single code/label (applied to the whole batch), a
    sequence of N codes/labels, or an ``[N, 3]`` one-hot array. It is ignored
    when ``fusion == "none"``. ``volume`` may also be an
    :class:`UnfoldedVolumes` batch, which skips unfolding in the first layer.
    """
    cfg = net.config
    if isinstance(volume, UnfoldedVolumes):
        x = volume
        if x.in_channels != cfg.in_channels or x.kernel_size != cfg.kernel_size or x.padding != cfg.kernel_size // 2:
            raise ShapeError(f"unfolded input ({x.in_channels} channels, kernel {x.kernel_size}) "
                             f"does not match the model config")
        n = len(x)
    else:
        x = _as_volume(volume)
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected volume [N,{cfg.in_channels},D,H,W], got shape {x.shape}")
        n = x.shape[0]
    onehot = None
    if cfg.fusion != "none":
        if treatments is None:
            raise ConfigError(f"fusion={cfg.fusion!r} needs a treatment")
        onehot = onehot_matrix(treatments)
        if onehot.shape[0] == 1 and n > 1:
            onehot = np.repeat(onehot, n, axis=0)
        if onehot.shape[0] != n:
            raise ShapeError(f"got {onehot.shape[0]} treatments for a batch of {n} volumes")
        onehot = Tensor(onehot)

    z = net.mapping(onehot) if cfg.fusion == "adain" else None
    pad = cfg.kernel_size // 2
    h = x
    for i, (w, b) in enumerate(net.convs):
        if isinstance(h, UnfoldedVolumes):
            h = conv3d_unfolded(h, w, b)
        else:
            h = conv3d(h, w, b, stride=1, padding=pad)
        if z is not None:
            scale, bias = net.affine(z, i)
            h = adain(h, scale, bias)
        h = maxpool3d(relu(h), 2)
    h = flatten(global_avg_pool(h))
    if cfg.fusion == "concat":
        h = concat(h, onehot, axis=1)
    last = len(net.fcs) - 1
    for i, (w, b) in enumerate(net.fcs):
        h = linear(h, w, b)
        if i != last:
            h = relu(h)
    if cfg.output_scale != 1.0:
        h = h * cfg.output_scale
    if cfg.output_offset != 0.0:
        h = h + cfg.output_offset
    return h


def clamp_days(days):
    """Clamp predictions to the observed survival range (reporting only)."""
    return np.clip(days, *SURVIVAL_RANGE)


def checksum(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array, dtype="<f8").tobytes()).hexdigest()[:16]


def param_manifest(net: SurvivalNet) -> list:
    """``[(name, shape, checksum), ...]`` in a stable order."""
    return [(name, tuple(p.shape), checksum(p.data)) for name, p in net.named_parameters()]


def parameter_count(net: SurvivalNet) -> int:
    return sum(p.data.size for p in net.parameters())
