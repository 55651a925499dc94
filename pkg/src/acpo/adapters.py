"""Low-rank adapters on the noise predictor's affine layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .diffusion import NoisePredictor, predict_noise
from .errors import ConfigError, ShapeError
from .numcore import Tensor


@dataclass
class AdapterSet:
    layers: list[str]
    rank: int
    scale: float
    mode: str = "adapted"

    def set_mode(self, mode: str) -> None:
        if mode not in ("adapted", "base"):
            raise ConfigError(f"unknown adapter mode {mode!r}")
        self.mode = mode

    def param_names(self) -> list[str]:
        return [f"{layer}.lora_{m}" for layer in self.layers for m in "AB"]


@dataclass
class LoraLayer:
    """Standalone view of one adapted affine layer."""

    base_weight: Tensor
    base_bias: Tensor
    A: Tensor
    B: Tensor
    rank: int
    scale: float = 1.0

    def __post_init__(self):
        out_dim, in_dim = self.base_weight.shape
        if not 1 <= self.rank <= min(out_dim, in_dim):
            raise ConfigError(f"rank {self.rank} outside [1, {min(out_dim, in_dim)}]")
        if self.A.shape != (self.rank, in_dim) or self.B.shape != (out_dim, self.rank):
            raise ShapeError(f"lora factors A{self.A.shape} B{self.B.shape} for weight {self.base_weight.shape}")


def adapted_forward(layer: LoraLayer, x) -> Tensor:
    """``W x + b + (scale / r) B (A x)``."""
    x = nc.as_tensor(x)
    if x.shape[-1] != layer.base_weight.shape[1]:
        raise ShapeError(f"adapted_forward: input {x.shape} vs weight {layer.base_weight.shape}")
    out = nc.affine(x, layer.base_weight, layer.base_bias)
    delta = nc.affine(nc.affine(x, layer.A), layer.B)
    return nc.add(out, nc.scale(delta, layer.scale / layer.rank))


def attach_adapters(net: NoisePredictor, rank: int = 4, scale: float = 1.0, seed: int = 0) -> AdapterSet:
    """Freeze every base parameter and add zero-initialised low-rank factors."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    if net.adapters is not None:
        raise ConfigError("adapters already attached")
    p = net.params
    for name in net.layer_names:
        out_dim, in_dim = p[f"{name}.weight"].shape
        if rank > min(out_dim, in_dim):
            raise ConfigError(f"rank {rank} exceeds layer {name} dimensions ({out_dim}x{in_dim})")
    rng = np.random.default_rng([seed, 11])
    p.freeze()
    for name in net.layer_names:
        out_dim, in_dim = p[f"{name}.weight"].shape
        p.add(f"{name}.lora_A", rng.normal(0.0, np.sqrt(1.0 / in_dim), (rank, in_dim)))
        p.add(f"{name}.lora_B", np.zeros((out_dim, rank)))
    net.adapters = AdapterSet(list(net.layer_names), rank, float(scale))
    return net.adapters


def lora_layer(net: NoisePredictor, name: str) -> LoraLayer:
    p, ad = net.params, net.adapters
    return LoraLayer(p[f"{name}.weight"], p[f"{name}.bias"], p[f"{name}.lora_A"], p[f"{name}.lora_B"],
                     ad.rank, ad.scale)


def expected_trainable(net: NoisePredictor, rank: int) -> int:
    return sum(rank * (w.shape[0] + w.shape[1])
               for w in (net.params[f"{n}.weight"] for n in net.layer_names))


def forward(net: NoisePredictor, x_t, t, condition=None) -> Tensor:
    """Prediction in the adapter set's current mode."""
    adapted = net.adapters is None or net.adapters.mode == "adapted"
    return predict_noise(net, x_t, t, condition, adapted=adapted)


def base_forward(net: NoisePredictor, x_t, t, condition=None) -> Tensor:
    """epsilon_base: deltas bypassed, detached from the graph."""
    if net.adapters is None:
        raise ConfigError("base_forward needs attached adapters")
    with nc.no_grad():
        return predict_noise(net, x_t, t, condition, adapted=False)
