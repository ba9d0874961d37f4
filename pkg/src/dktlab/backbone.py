"""MLP feature extractor F(x) -> h."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass
class MLPConfig:
    input_dim: int = 1
    hidden_dims: list[int] = field(default_factory=lambda: [40, 40])
    output_dim: int = 40
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]


class MLP:
    """Affine layers with an activation between them; the last layer is affine only."""

    def __init__(self, config: MLPConfig, layers: list[tuple[Tensor, Tensor]] | None = None):
        self.config = config
        self.layers = layers if layers is not None else init_mlp(config)

    def forward(self, x) -> Tensor:
        return forward(self.layers, x, self.config.activation)

    __call__ = forward

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def n_params(self) -> int:
        return sum(t.values.size for t in self.tensors())

    def flatten(self) -> np.ndarray:
        return flatten_params(self.layers)

    def load_flat(self, flat) -> None:
        unflatten_params(flat, self.layers)

    def clone(self) -> "MLP":
        layers = [(Tensor(w.values.copy(), requires_grad=True, name=w.name),
                   Tensor(b.values.copy(), requires_grad=True, name=b.name)) for w, b in self.layers]
        return MLP(self.config, layers)


def init_mlp(config: MLPConfig) -> list[tuple[Tensor, Tensor]]:
    """Glorot-uniform weights (out x in), zero biases (1 x out)."""
    rng = np.random.default_rng(config.seed)
    dims = config.dims
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = Tensor(rng.uniform(-a, a, size=(fan_out, fan_in)), requires_grad=True, name=f"w{i}")
        b = Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"b{i}")
        layers.append((w, b))
    return layers


def forward(layers, x, activation: str = "relu") -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    act = ACTIVATIONS[activation]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        if h.shape[1] != w.shape[1]:
            raise ad.ShapeError(f"layer {i} expects {w.shape[1]} inputs, got {h.shape[1]}")
        h = h @ w.T + b
        if i < last:
            h = act(h)
    return h


def flatten_params(layers) -> np.ndarray:
    return np.concatenate([t.values.ravel() for layer in layers for t in layer])


def unflatten_params(flat, layers) -> None:
    """Write ``flat`` back into the layer tensors in place."""
    flat = np.asarray(flat, dtype=np.float64).ravel()
    tensors = [t for layer in layers for t in layer]
    total = sum(t.values.size for t in tensors)
    if flat.size != total:
        raise ValueError(f"expected {total} parameters, got {flat.size}")
    pos = 0
    for t in tensors:
        k = t.values.size
        t.values = flat[pos:pos + k].reshape(t.values.shape).copy()
        pos += k
