"""Layer modules built on the autodiff engine."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import engine as E
from .engine import Tensor

LAYER_KINDS = ("conv1d", "tconv1d", "batchnorm", "leaky_relu", "dense", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS + ("unflatten",):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for key in ("in_channels", "out_channels", "kernel_size", "stride", "in_features",
                    "out_features", "num_features"):
            if key in self.params and int(self.params[key]) <= 0:
                raise ValueError(f"{self.kind}: {key} must be positive")
        if self.params.get("padding", 0) < 0:
            raise ValueError(f"{self.kind}: padding must be non-negative")
        if self.kind == "leaky_relu" and not 0.0 < self.params.get("slope", 0.2) < 1.0:
            raise ValueError("leaky_relu slope must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind")
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return cls(kind, d)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.2) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    training = True

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(())

    def _own_parameters(self) -> dict[str, Tensor]:
        return {}

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}{k}": v for k, v in self._own_parameters().items()}
        for name, child in self._children():
            out.update(child.parameters(f"{prefix}{name}."))
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{k}": v for k, v in self._own_buffers().items()}
        for name, child in self._children():
            out.update(child.buffers(f"{prefix}{name}."))
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, *,
                 rng: np.random.Generator, slope: float = 0.2):
        self.stride, self.padding = stride, padding
        fan_in = in_channels * kernel_size
        self.weight = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in, slope),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def _own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return E.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, *,
                 rng: np.random.Generator, slope: float = 0.2):
        self.stride, self.padding = stride, padding
        fan_in = in_channels * kernel_size
        self.weight = Tensor(kaiming_uniform(rng, (in_channels, out_channels, kernel_size), fan_in, slope),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def _own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return E.tconv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm1d(Module):
    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def _own_parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def _own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        return E.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2):
        self.slope = slope

    def forward(self, x):
        return E.leaky_relu(x, self.slope)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator,
                 slope: float = 0.2):
        self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features, slope),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def _own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return E.dense(x, self.weight, self.bias)


class Flatten(Module):
    def forward(self, x):
        return E.reshape(x, (x.shape[0], -1))


class Unflatten(Module):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        return E.reshape(x, (x.shape[0],) + self.shape)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def _children(self):
        return ((str(i), layer) for i, layer in enumerate(self.layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Module:
    p = spec.params
    if spec.kind == "conv1d":
        return Conv1d(p["in_channels"], p["out_channels"], p["kernel_size"], p.get("stride", 1),
                      p.get("padding", 0), rng=rng, slope=p.get("init_slope", 0.2))
    if spec.kind == "tconv1d":
        return ConvTranspose1d(p["in_channels"], p["out_channels"], p["kernel_size"],
                               p.get("stride", 1), p.get("padding", 0), rng=rng,
                               slope=p.get("init_slope", 0.2))
    if spec.kind == "batchnorm":
        return BatchNorm1d(p["num_features"], p.get("momentum", 0.9), p.get("eps", 1e-5))
    if spec.kind == "leaky_relu":
        return LeakyReLU(p.get("slope", 0.2))
    if spec.kind == "dense":
        return Dense(p["in_features"], p["out_features"], rng=rng, slope=p.get("init_slope", 0.2))
    if spec.kind == "flatten":
        return Flatten()
    return Unflatten(p["shape"])


def build_stack(specs, rng: np.random.Generator) -> Sequential:
    return Sequential(*(build_layer(s, rng) for s in specs))
