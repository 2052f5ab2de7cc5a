"""Recurrent cells, embeddings, affine layers, dropout, and initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (DimensionError, Tensor, concat, matmul, sigmoid, take_rows,
                     tanh)


class ConfigurationError(ValueError):
    pass


@dataclass
class InitSpec:
    """Per-parameter-group uniform init ranges (low, high)."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, (low, high) in self.ranges.items():
            if not low < high:
                raise ConfigurationError(f"init range for '{name}' needs low < high")

    def range_for(self, group: str) -> tuple[float, float]:
        if group not in self.ranges:
            raise ConfigurationError(f"init spec missing parameter group '{group}'")
        return self.ranges[group]


def default_init_spec() -> InitSpec:
    """Recurrent/affine weights in U(-0.01, 0.01), embeddings in U(-0.1, 0.1)."""
    return InitSpec({"weights": (-0.01, 0.01), "embedding": (-0.1, 0.1)})


def offset_init_spec() -> InitSpec:
    """All-positive offset init: weights U(0.04, 0.06), embeddings U(0.0, 0.2)."""
    return InitSpec({"weights": (0.04, 0.06), "embedding": (0.0, 0.2)})


def parameter(shape: tuple[int, ...], low: float, high: float,
              rng: np.random.Generator) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


class Lstm:
    """Single-layer LSTM cell with batched step and sequence unroll.

    Gate layout along the 4H axis is input, forget, cell, output.
    """

    def __init__(self, input_size: int, hidden_size: int, spec: InitSpec,
                 rng: np.random.Generator, group: str = "weights"):
        self.input_size = input_size
        self.hidden_size = hidden_size
        low, high = spec.range_for(group)
        self.w_ih = parameter((4 * hidden_size, input_size), low, high, rng)
        self.w_hh = parameter((4 * hidden_size, hidden_size), low, high, rng)
        self.bias = parameter((4 * hidden_size,), low, high, rng)

    def parameters(self) -> dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "bias": self.bias}

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        zeros = np.zeros((batch, self.hidden_size))
        return Tensor(zeros), Tensor(zeros.copy())

    def step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        """One gated recurrence step: x is (B, input), state is ((B,H), (B,H))."""
        h, c = state
        if x.shape[-1] != self.input_size:
            raise DimensionError(
                f"lstm input extent {x.shape[-1]}, expected {self.input_size}")
        gates = matmul(x, transpose(self.w_ih)) + matmul(h, transpose(self.w_hh)) \
            + self.bias
        hs = self.hidden_size
        i = sigmoid(gates[:, 0 * hs:1 * hs])
        f = sigmoid(gates[:, 1 * hs:2 * hs])
        g = tanh(gates[:, 2 * hs:3 * hs])
        o = sigmoid(gates[:, 3 * hs:4 * hs])
        c_new = f * c + i * g
        h_new = o * tanh(c_new)
        return h_new, c_new

    def unroll(self, inputs: list[Tensor],
               state: tuple[Tensor, Tensor] | None = None) -> list[Tensor]:
        """Run the cell over a list of (B, input) steps; returns hidden states."""
        if state is None:
            batch = inputs[0].shape[0] if inputs else 1
            state = self.initial_state(batch)
        hs = []
        for x in inputs:
            h, c = self.step(x, state)
            state = (h, c)
            hs.append(h)
        return hs


def transpose(t: Tensor) -> Tensor:
    data = t.data.T
    return Tensor._make(data, (t,), lambda g: (g.T,))


class Embedding:
    def __init__(self, vocab_size: int, dim: int, spec: InitSpec,
                 rng: np.random.Generator, group: str = "embedding"):
        self.vocab_size = vocab_size
        self.dim = dim
        low, high = spec.range_for(group)
        self.weight = parameter((vocab_size, dim), low, high, rng)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}

    def lookup(self, ids: np.ndarray) -> Tensor:
        return take_rows(self.weight, ids)


class Linear:
    def __init__(self, in_size: int, out_size: int, spec: InitSpec,
                 rng: np.random.Generator, group: str = "weights"):
        low, high = spec.range_for(group)
        self.weight = parameter((out_size, in_size), low, high, rng)
        self.bias = parameter((out_size,), low, high, rng)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, transpose(self.weight)) + self.bias


def dropout_apply(x: Tensor, rate: float, training: bool,
                  rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability rate, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("training-mode dropout needs a random stream")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


__all__ = [
    "ConfigurationError", "Embedding", "InitSpec", "Linear", "Lstm",
    "default_init_spec", "dropout_apply", "offset_init_spec", "parameter",
    "transpose", "concat",
]
