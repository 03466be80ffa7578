"""Treatment pathway: one-hot code -> mapping MLP -> latent -> per-layer AdaIN.

A single latent ``z`` is shared by every convolutional stage; each stage owns
a linear head producing ``2 * C_i`` numbers, the first half used as the
per-channel scale and the second half as the per-channel bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ShapeError, ValidationError
from .tensor import EPS, Tensor, _record, instance_moments, leaky_relu, linear, narrow, reshape

TREATMENTS = ("GTR", "STR", "NA")
N_TREATMENTS = len(TREATMENTS)
LATENT_WIDTH = 16
MAPPING_SLOPE = 0.2


@dataclass(frozen=True)
class TreatmentCode:
    """One of GTR / STR / NA with a fixed one-hot encoding order."""

    label: str

    def __post_init__(self):
        if self.label not in TREATMENTS:
            raise ValidationError(f"unknown treatment {self.label!r}; expected one of {TREATMENTS}")

    @property
    def index(self) -> int:
        return TREATMENTS.index(self.label)

    @property
    def onehot(self) -> np.ndarray:
        vec = np.zeros(N_TREATMENTS)
        vec[self.index] = 1.0
        return vec

    @classmethod
    def parse(cls, value) -> "TreatmentCode":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls(value.upper())
        return cls.from_onehot(value)

    @classmethod
    def from_onehot(cls, vec) -> "TreatmentCode":
        return cls(TREATMENTS[int(np.argmax(validate_onehot(vec)))])

    def __str__(self) -> str:
        return self.label


def validate_onehot(vec) -> np.ndarray:
    arr = np.asarray(vec, dtype=float)
    if arr.shape != (N_TREATMENTS,):
        raise ValidationError(f"one-hot treatment must have length {N_TREATMENTS}, got shape {arr.shape}")
    if not np.all((arr == 0.0) | (arr == 1.0)) or arr.sum() != 1.0:
        raise ValidationError(f"malformed one-hot treatment vector {arr.tolist()}")
    return arr


def onehot_matrix(treatments) -> np.ndarray:
    """Stack treatments (codes, labels or one-hot rows) into an ``[N, 3]`` array."""
    if isinstance(treatments, (TreatmentCode, str)):
        treatments = [treatments]
    if isinstance(treatments, np.ndarray) and treatments.dtype.kind in "fiub":
        return np.stack([validate_onehot(row) for row in np.atleast_2d(treatments)])
    return np.stack([TreatmentCode.parse(t).onehot for t in treatments])


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, std: float):
    weight = Tensor(rng.normal(0.0, std, size=(fan_out, fan_in)), requires_grad=True)
    bias = Tensor(np.zeros(fan_out), requires_grad=True)
    return weight, bias


class MappingNetwork:
    """Three 16-wide linear layers with leaky-ReLU (0.2) between them."""

    def __init__(self, rng: np.random.Generator, width: int = LATENT_WIDTH, depth: int = 3):
        self.width = width
        self.layers = []
        fan_in = N_TREATMENTS
        gain = np.sqrt(2.0 / (1.0 + MAPPING_SLOPE ** 2))
        for _ in range(depth):
            self.layers.append(_dense(rng, fan_in, width, gain / np.sqrt(fan_in)))
            fan_in = width

    def named_parameters(self, prefix: str = "mapping"):
        for i, (w, b) in enumerate(self.layers):
            yield f"{prefix}{i}.weight", w
            yield f"{prefix}{i}.bias", b

    def __call__(self, onehot: Tensor) -> Tensor:
        h = onehot
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = linear(h, w, b)
            if i != last:
                h = leaky_relu(h, MAPPING_SLOPE)
        return h


class AffineSpecializer:
    """One linear head per conv stage mapping ``z`` to ``(scale, bias)``.

    Heads start with small random weights and a bias of ones for the scale half
    and zeros for the bias half, so an untrained model performs plain instance
    normalization.
    """

    def __init__(self, rng: np.random.Generator, channels: Sequence[int], latent_width: int = LATENT_WIDTH,
                 init_std: float = 0.01):
        self.channels = list(channels)
        self.heads = []
        for c in self.channels:
            weight = Tensor(rng.normal(0.0, init_std, size=(2 * c, latent_width)), requires_grad=True)
            bias = Tensor(np.concatenate([np.ones(c), np.zeros(c)]), requires_grad=True)
            self.heads.append((weight, bias))

    def named_parameters(self, prefix: str = "affine"):
        for i, (w, b) in enumerate(self.heads):
            yield f"{prefix}{i}.weight", w
            yield f"{prefix}{i}.bias", b

    def __call__(self, z: Tensor, layer_index: int):
        if not 0 <= layer_index < len(self.heads):
            raise IndexError(f"layer index {layer_index} out of range for {len(self.heads)} conv layers")
        c = self.channels[layer_index]
        out = linear(z, *self.heads[layer_index])
        return narrow(out, 1, 0, c), narrow(out, 1, c, 2 * c)


def map_treatment(t, net: MappingNetwork) -> Tensor:
    """Latent code for one treatment (shape ``[16]``) or a batch (``[N, 16]``)."""
    single = isinstance(t, (TreatmentCode, str)) or (
        isinstance(t, np.ndarray) and t.ndim == 1 and t.dtype.kind in "fiub")
    if single:
        onehot = TreatmentCode.parse(t).onehot[None, :]
        return reshape(net(Tensor(onehot)), (net.width,))
    return net(Tensor(onehot_matrix(t)))


def specialize(z: Tensor, layer_index: int, spec: AffineSpecializer):
    """Per-channel ``(scale, bias)`` for conv stage ``layer_index``."""
    if z.ndim == 1:
        scale, bias = spec(reshape(z, (1, z.shape[0])), layer_index)
        c = spec.channels[layer_index]
        return reshape(scale, (c,)), reshape(bias, (c,))
    return spec(z, layer_index)


def adain(x: Tensor, scale: Tensor, bias: Tensor, eps: float = EPS) -> Tensor:
    """``scale * (x - mu(x)) / sigma(x) + bias`` per sample and channel.

    ``scale`` and ``bias`` are ``[C]`` (shared across the batch) or ``[N, C]``.
    """
    if x.ndim != 5:
        raise ShapeError(f"adain input must be [N,C,D,H,W], got shape {x.shape}")
    n, c = x.shape[:2]
    for name, t in (("scale", scale), ("bias", bias)):
        if t.shape not in ((c,), (n, c)):
            raise ShapeError(f"adain {name} shape {t.shape} does not match {c} channels of input {x.shape}")
    shared = scale.ndim == 1
    s = np.broadcast_to(scale.data, (n, c))
    b = np.broadcast_to(bias.data, (n, c))
    mu, sigma, centered = instance_moments(x.data, eps)
    xhat = centered / sigma[:, :, None, None, None]
    out = s[:, :, None, None, None] * xhat + b[:, :, None, None, None]

    def grad_fn(g):
        gs = np.sum(g * xhat, axis=(2, 3, 4))
        gb = np.sum(g, axis=(2, 3, 4))
        gx = None
        if x.requires_grad:
            gh = g * s[:, :, None, None, None]
            mean_gh = gh.mean(axis=(2, 3, 4), keepdims=True)
            mean_ghx = np.mean(gh * xhat, axis=(2, 3, 4), keepdims=True)
            gx = (gh - mean_gh - xhat * mean_ghx) / sigma[:, :, None, None, None]
        if shared:
            gs, gb = gs.sum(axis=0), gb.sum(axis=0)
        return gx, gs, gb

    return _record(out, (x, scale, bias), grad_fn, "adain")
