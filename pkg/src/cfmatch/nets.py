"""Plain feed-forward networks: the generator and the autoencoder halves.

Parameters live in a flat name -> tensor dict so optimizers and checkpoints
can treat every network uniformly. A frozen network keeps serving forward
passes but drops out of gradient tracking entirely, which guarantees its
parameters are bit-identical before and after any training run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, relu, tanh

__all__ = [
    "Mlp",
    "MlpSpec",
    "decoder_forward",
    "encoder_forward",
    "generator_forward",
    "mlp_init",
]

_ACTIVATIONS = {"tanh": tanh, "relu": relu}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first) plus the hidden activation."""

    widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ShapeError(f"MlpSpec needs at least one hidden layer, got widths {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ShapeError(f"MlpSpec widths must be positive, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation: {self.activation!r}")


def mlp_init(spec: MlpSpec, seed) -> dict[str, Tensor]:
    """Uniform weights scaled by 1/sqrt(fan_in), zero biases, one rng per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths, spec.widths[1:])):
        scale = 1.0 / np.sqrt(fan_in)
        params[f"w{i}"] = Tensor(rng.uniform(-scale, scale, (fan_in, fan_out)), requires_grad=True)
        params[f"b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return params


class Mlp:
    """A spec plus its parameters; callable on a 2-D batch."""

    def __init__(self, spec: MlpSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params
        self.frozen = False

    @classmethod
    def build(cls, spec: MlpSpec, seed) -> "Mlp":
        return cls(spec, mlp_init(spec, seed))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.spec.widths[0]:
            raise ShapeError(
                f"Mlp: input shape {x.shape} does not match input width {self.spec.widths[0]}"
            )
        activation = _ACTIVATIONS[self.spec.activation]
        n_layers = len(self.spec.widths) - 1
        h = x
        for i in range(n_layers):
            h = (h @ self.params[f"w{i}"]) + self.params[f"b{i}"]
            if i < n_layers - 1:
                h = activation(h)
        return h

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def freeze(self) -> None:
        """Stop gradient tracking; the parameters become constants."""
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copies of all parameter arrays, for bit-exact comparisons."""
        return {name: p.data.copy() for name, p in self.params.items()}


def generator_forward(z: Tensor, generator: Mlp) -> Tensor:
    """Map latent noise to samples; rows are independent."""
    return generator(z)


def encoder_forward(x: Tensor, encoder: Mlp) -> Tensor:
    return encoder(x)


def decoder_forward(latent: Tensor, decoder: Mlp) -> Tensor:
    return decoder(latent)
