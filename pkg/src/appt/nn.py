"""Parameter storage, MLP descriptors, and seeded initialization.

Parameters are declared first (name + shape + kind) and materialized by
`init_params`, which draws every tensor from one SplitMix64 counter stream
in declaration order: same declarations + same seed => bitwise-identical
store. Weights are uniform in ±sqrt(6/fan_in) with fan_in = rows of the
weight matrix; biases and norm shifts start at zero, norm scales at one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError, MissingParameterError
from .rng import SplitMix64

WEIGHT = "weight"
BIAS = "bias"
NORM_SCALE = "norm_scale"
NORM_SHIFT = "norm_shift"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    kind: str


@dataclass(frozen=True)
class MlpSpec:
    """Widths [in, hidden..., out]; ReLU between layers, never after the
    last; optional per-layer channel normalization after the affine map."""

    widths: tuple
    norm: tuple = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ConfigurationError(f"an MLP needs at least one layer, got widths {widths}")
        if any(w < 1 for w in widths):
            raise ConfigurationError(f"MLP widths must be >= 1, got {widths}")
        norm = tuple(bool(b) for b in self.norm) if self.norm else (False,) * self.layers
        object.__setattr__(self, "norm", norm)
        if len(norm) != self.layers:
            raise ConfigurationError(
                f"norm flags ({len(norm)}) must match layer count ({self.layers})")

    @property
    def layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


def mlp_param_specs(prefix: str, spec: MlpSpec) -> list:
    out = []
    for i in range(spec.layers):
        cin, cout = spec.widths[i], spec.widths[i + 1]
        out.append(ParamSpec(f"{prefix}.{i}.weight", (cin, cout), WEIGHT))
        out.append(ParamSpec(f"{prefix}.{i}.bias", (cout,), BIAS))
        if spec.norm[i]:
            out.append(ParamSpec(f"{prefix}.{i}.norm_scale", (cout,), NORM_SCALE))
            out.append(ParamSpec(f"{prefix}.{i}.norm_shift", (cout,), NORM_SHIFT))
    return out


class ParamStore:
    """Ordered map name -> parameter tensor (value + same-shape gradient)."""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}
        self._kinds: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, kind: str = WEIGHT) -> ad.Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        t = ad.Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._kinds[name] = kind
        return t

    def __getitem__(self, name: str) -> ad.Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise MissingParameterError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def items(self) -> Iterator:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.copy(), self._kinds[name])
        return out


def init_params(specs: Iterable[ParamSpec], seed: int) -> ParamStore:
    """Materialize declared parameters; bitwise-reproducible per seed."""
    store = ParamStore()
    stream = SplitMix64(seed).derive("params")
    for spec in specs:
        size = int(np.prod(spec.shape))
        if spec.kind == WEIGHT:
            fan_in = int(spec.shape[0])
            bound = np.sqrt(6.0 / fan_in)
            values = stream.uniform(size, -bound, bound).reshape(spec.shape)
        elif spec.kind == NORM_SCALE:
            values = np.ones(spec.shape)
        else:
            values = np.zeros(spec.shape)
        store.add(spec.name, values, spec.kind)
    return store


def perturb_params(params: ParamStore, seed: int, scale: float = 0.1) -> None:
    """Move every parameter to a generic point by adding seeded uniform
    noise. Gradient checks need this: zero-initialized biases make the
    self-neighbor rows of position encoders sit exactly on ReLU kinks,
    where finite differences straddle the non-smooth point."""
    stream = SplitMix64(seed).derive("perturb")
    for _, t in params.items():
        t.data += stream.uniform(t.size, -scale, scale).reshape(t.data.shape)


def mlp_forward(spec: MlpSpec, params: ParamStore, x: ad.Tensor,
                prefix: str) -> ad.Tensor:
    """Affine -> optional channel norm -> ReLU per layer (no final ReLU).

    Accepts inputs of any rank; the last axis is the channel axis.
    """
    if x.data.shape[-1] != spec.in_width:
        raise DimensionError(
            f"MLP {prefix!r} expects {spec.in_width} input channels, "
            f"got shape {x.data.shape}")
    lead_shape = x.data.shape[:-1]
    h = x if x.data.ndim == 2 else ad.reshape(x, (-1, spec.in_width))
    for i in range(spec.layers):
        w = params[f"{prefix}.{i}.weight"]
        b = params[f"{prefix}.{i}.bias"]
        h = ad.add(ad.matmul(h, w), b)
        if spec.norm[i]:
            h = ad.channel_norm(h, params[f"{prefix}.{i}.norm_scale"],
                                params[f"{prefix}.{i}.norm_shift"])
        if i < spec.layers - 1:
            h = ad.relu(h)
    if lead_shape != h.data.shape[:-1]:
        h = ad.reshape(h, lead_shape + (spec.out_width,))
    return h
