"""Dense multilayer perceptrons with an exact backward pass, Adam and Polyak averaging.

Everything runs on float64 numpy arrays. Parameters are immutable values: every
operation returns new arrays instead of writing into its arguments. A `ModelParams`
is shared between an agent, the federation server and the wire codec without copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


class Activation(StrEnum):
    RELU = "relu"
    TANH = "tanh"
    LINEAR = "linear"


class TrainGate(StrEnum):
    BATCH = "batch"
    FULL = "full"


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    hidden_activation: Activation = Activation.RELU
    output_activation: Activation = Activation.LINEAR

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ShapeError("an MLP needs at least an input and an output size")
        if any(s < 1 for s in self.layer_sizes):
            raise ShapeError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.hidden_activation is not Activation.RELU:
            raise ShapeError("hidden layers only support relu")
        if self.output_activation not in (Activation.TANH, Activation.LINEAR):
            raise ShapeError("output activation must be tanh or linear")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        """(out, in) weight shape of every layer."""
        return list(zip(self.layer_sizes[1:], self.layer_sizes[:-1]))

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.shapes)


class DenseLayer(NamedTuple):
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass(frozen=True, eq=False)
class ModelParams:
    layers: tuple[DenseLayer, ...]

    def __post_init__(self):
        object.__setattr__(
            self,
            "layers",
            tuple(
                DenseLayer(
                    np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)
                )
                for w, b in self.layers
            ),
        )
        for index, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ShapeError(
                    f"layer {index}: weight {w.shape} and bias {b.shape} do not agree"
                )

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [layer.weight.shape for layer in self.layers]

    def conforms_to(self, spec: MlpSpec) -> bool:
        return self.shapes == spec.shapes

    def require_spec(self, spec: MlpSpec) -> None:
        if not self.conforms_to(spec):
            raise ShapeError(
                f"parameters with shapes {self.shapes} do not match {spec.shapes}"
            )

    def require_same_shape(self, other: ModelParams) -> None:
        if self.shapes != other.shapes:
            raise ShapeError(f"shape mismatch: {self.shapes} vs {other.shapes}")

    def copy(self) -> ModelParams:
        return ModelParams(
            tuple(DenseLayer(w.copy(), b.copy()) for w, b in self.layers)
        )

    def bitwise_equal(self, other: ModelParams) -> bool:
        return self.shapes == other.shapes and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )

    def is_finite(self) -> bool:
        return all(
            np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers
        )


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(
        tuple(DenseLayer(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers)
    )


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform in +-1/sqrt(fan_in) for weights and biases alike."""
    layers = []
    for out_size, in_size in spec.shapes:
        bound = 1.0 / np.sqrt(in_size)
        weight = rng.uniform(-bound, bound, size=(out_size, in_size))
        bias = rng.uniform(-bound, bound, size=out_size)
        layers.append(DenseLayer(weight, bias))
    return ModelParams(tuple(layers))


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Activation record of one forward pass, consumed by `mlp_backward`."""

    spec: MlpSpec
    shapes: list[tuple[int, int]]
    inputs: list[np.ndarray]  # input to each layer, (batch, in)
    pre_activations: list[np.ndarray]  # (batch, out)
    output: np.ndarray
    single: bool


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    if activation is Activation.TANH:
        return np.tanh(z)
    return z


def _derivative(activated: np.ndarray, z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if activation is Activation.TANH:
        return 1.0 - activated**2
    return np.ones_like(z)


def mlp_forward(
    params: ModelParams, spec: MlpSpec, input: np.ndarray
) -> tuple[np.ndarray, ForwardCache]:
    """Run `input` (a vector or a (batch, in) matrix) through the network."""
    params.require_spec(spec)
    x = np.asarray(input, dtype=np.float64)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.ndim != 2 or a.shape[1] != spec.input_size:
        raise ShapeError(
            f"input of shape {x.shape} does not match input size {spec.input_size}"
        )

    inputs, pre_activations = [], []
    last = len(params.layers) - 1
    for index, (w, b) in enumerate(params.layers):
        inputs.append(a)
        z = a @ w.T + b
        pre_activations.append(z)
        a = _activate(
            z, spec.output_activation if index == last else spec.hidden_activation
        )

    cache = ForwardCache(spec, params.shapes, inputs, pre_activations, a, single)
    return (a[0] if single else a), cache


def mlp_backward(
    params: ModelParams, cache: ForwardCache, output_gradient: np.ndarray
) -> tuple[ModelParams, np.ndarray]:
    """Gradients of a scalar loss given dLoss/dOutput.

    Batched caches sum parameter gradients over the batch; scale the output
    gradient if a mean is wanted.
    """
    if cache.shapes != params.shapes:
        raise ShapeError("forward cache was produced by differently shaped parameters")
    g = np.atleast_2d(np.asarray(output_gradient, dtype=np.float64))
    if g.shape != cache.output.shape:
        raise ShapeError(
            f"output gradient {g.shape} does not match output {cache.output.shape}"
        )

    delta = g * _derivative(cache.output, cache.pre_activations[-1], cache.spec.output_activation)

    grads: list[DenseLayer] = []
    for index in range(len(params.layers) - 1, -1, -1):
        w = params.layers[index].weight
        grads.append(DenseLayer(delta.T @ cache.inputs[index], delta.sum(axis=0)))
        upstream = delta @ w
        if index > 0:
            # the input of this layer is the activation of the one below
            delta = upstream * _derivative(
                cache.inputs[index], cache.pre_activations[index - 1], cache.spec.hidden_activation
            )
    grads.reverse()
    input_gradient = upstream[0] if cache.single else upstream
    return ModelParams(tuple(grads)), input_gradient


@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: ModelParams
    second_moment: ModelParams
    step: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam", "beta1 and beta2 must lie in [0, 1)")
        if self.learning_rate <= 0.0:
            raise ConfigError("adam.learning_rate", "must be positive")
        self.first_moment.require_same_shape(self.second_moment)


def adam_init(params: ModelParams, learning_rate: float, **kwargs) -> AdamState:
    return AdamState(
        zeros_like(params), zeros_like(params), learning_rate=learning_rate, **kwargs
    )


def adam_step(
    params: ModelParams, grads: ModelParams, state: AdamState
) -> tuple[ModelParams, AdamState]:
    params.require_same_shape(grads)
    params.require_same_shape(state.first_moment)
    for index, (gw, gb) in enumerate(grads.layers):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError(f"non-finite gradient in layer {index}")

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step

    new_params, new_first, new_second = [], [], []
    for p_layer, g_layer, m_layer, v_layer in zip(
        params.layers,
        grads.layers,
        state.first_moment.layers,
        state.second_moment.layers,
    ):
        updated, firsts, seconds = [], [], []
        for p, g, m, v in zip(p_layer, g_layer, m_layer, v_layer):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            updated.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
            firsts.append(m)
            seconds.append(v)
        new_params.append(DenseLayer(*updated))
        new_first.append(DenseLayer(*firsts))
        new_second.append(DenseLayer(*seconds))

    result = ModelParams(tuple(new_params))
    if not result.is_finite():
        raise NumericError(f"Adam step {step} produced non-finite parameters")
    new_state = AdamState(
        ModelParams(tuple(new_first)),
        ModelParams(tuple(new_second)),
        step=step,
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
    )
    return result, new_state


def soft_update(target: ModelParams, source: ModelParams, tau: float) -> ModelParams:
    """Polyak average: (1 - tau) * target + tau * source, entry by entry."""
    target.require_same_shape(source)
    if not 0.0 <= tau <= 1.0:
        raise ConfigError("tau", f"must lie in [0, 1], got {tau}")
    keep = 1.0 - tau
    return ModelParams(
        tuple(
            DenseLayer(keep * tw + tau * sw, keep * tb + tau * sb)
            for (tw, tb), (sw, sb) in zip(target.layers, source.layers)
        )
    )


def flatten(params: ModelParams) -> np.ndarray:
    """Layer order; row-major weights, then the bias of the same layer."""
    parts = []
    for w, b in params.layers:
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(vector: np.ndarray, spec: MlpSpec) -> ModelParams:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] != spec.param_count:
        raise ShapeError(
            f"vector of length {vector.size} does not hold {spec.param_count} parameters"
        )
    layers, offset = [], 0
    for out_size, in_size in spec.shapes:
        weight = vector[offset : offset + out_size * in_size].reshape(out_size, in_size)
        offset += out_size * in_size
        bias = vector[offset : offset + out_size]
        offset += out_size
        layers.append(DenseLayer(weight.copy(), bias.copy()))
    return ModelParams(tuple(layers))


@dataclass(frozen=True)
class DdpgHyperparams:
    gamma: float = 0.99
    tau: float = 0.02
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    buffer_capacity: int = 2500
    batch_size: int = 32
    hidden_sizes: tuple[int, ...] = field(default=(128, 128, 128))
    train_gate: TrainGate = TrainGate.BATCH

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("ddpg.gamma", "must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("ddpg.tau", "must lie in (0, 1]")
        if self.actor_lr <= 0.0 or self.critic_lr <= 0.0:
            raise ConfigError("ddpg.actor_lr", "learning rates must be positive")
        if self.buffer_capacity < 1 or self.batch_size < 1:
            raise ConfigError("ddpg.batch_size", "sizes must be positive")
        if self.batch_size > self.buffer_capacity:
            raise ConfigError("ddpg.batch_size", "must not exceed buffer_capacity")
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        object.__setattr__(self, "train_gate", TrainGate(self.train_gate))
