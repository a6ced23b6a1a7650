"""Minimal dense-net kernel: forward, exact reverse-mode backward, Adam.

Everything is float64 and deterministic. No batch norm, no convolutions;
a handful of fully connected layers is all the alignment stack needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FormatError

ACTIVATIONS = ("relu", "identity")

FFN_MAGIC = b"FFN1"
_ACT_TAG = {"identity": 0, "relu": 1}
_TAG_ACT = {v: k for k, v in _ACT_TAG.items()}


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; the run must abort."""


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must match weight rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("parameters must be finite")


class DenseNet:
    """Chain of affine layers with relu/identity activations."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ValueError("need at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weights.shape[1] != prev.weights.shape[0]:
                raise ValueError(
                    f"layer dims do not chain: {prev.weights.shape} -> "
                    f"{nxt.weights.shape}"
                )
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def signature(self) -> tuple:
        return tuple(
            (l.weights.shape[1], l.weights.shape[0], l.activation)
            for l in self.layers
        )

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            params.append(layer.bias)
        return params

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_dense(dims: Sequence[int], activations: Sequence[str],
               rng: np.random.Generator) -> DenseNet:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)) from the given rng."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


@dataclass
class Tape:
    """Layer inputs and pre-activations from one forward pass.

    A tape belongs to the net that produced it and is consumed by exactly
    one backward pass.
    """

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    signature: tuple
    consumed: bool = False


@dataclass
class Gradients:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (dW, db) per layer
    input_grad: np.ndarray

    def flat(self) -> list[np.ndarray]:
        out = []
        for dw, db in self.layers:
            out.append(dw)
            out.append(db)
        return out


def forward(net: DenseNet, batch: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(
            f"batch must have shape (n, {net.input_dim}), got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("batch must be finite")
    inputs, preacts = [], []
    for layer in net.layers:
        inputs.append(x)
        pre = x @ layer.weights.T + layer.bias
        preacts.append(pre)
        x = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return x, Tape(inputs=inputs, preacts=preacts, signature=net.signature)


def backward(net: DenseNet, tape: Tape, output_grad: np.ndarray) -> Gradients:
    """Exact reverse-mode gradients of the recorded composition.

    The relu subgradient at 0 is 0. The tape is marked consumed.
    """
    if tape.consumed:
        raise ValueError("tape already consumed by a backward pass")
    if tape.signature != net.signature:
        raise ValueError("tape does not match this net")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.preacts[-1].shape:
        raise ValueError(
            f"output_grad must have shape {tape.preacts[-1].shape}, got {g.shape}"
        )
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            g = g * (tape.preacts[i] > 0.0)
        dw = g.T @ tape.inputs[i]
        db = g.sum(axis=0)
        layer_grads[i] = (dw, db)
        g = g @ layer.weights
    tape.consumed = True
    return Gradients(layers=layer_grads, input_grad=g)


@dataclass
class LrSchedule:
    """Linear warmup into cosine decay (or a constant rate when
    ``total_steps`` is unset)."""

    base_lr: float
    warmup_steps: int = 0
    total_steps: int | None = None

    def lr_at(self, step: int) -> float:
        """Effective rate for a 0-based step index."""
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        if self.total_steps is None or self.total_steps <= self.warmup_steps:
            return self.base_lr
        t = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        t = min(t, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    """Adam accumulators plus the step count and schedule."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    schedule: LrSchedule
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray],
                   schedule: LrSchedule) -> "OptimizerState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            schedule=schedule,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: OptimizerState) -> None:
    """One bias-corrected adaptive update, in place on ``params``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params/grads/state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("parameter/gradient shape mismatch")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at step {state.step + 1}")
    lr = state.schedule.lr_at(state.step)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def dense_to_bytes(net: DenseNet) -> bytes:
    """FFN1 checkpoint: magic, u32 layer count, per layer u32 in/out and a
    u8 activation tag, then per layer f64 weights (row-major) and bias."""
    parts = [FFN_MAGIC, np.array([len(net.layers)], dtype="<u4").tobytes()]
    for layer in net.layers:
        out_d, in_d = layer.weights.shape
        parts.append(np.array([in_d, out_d], dtype="<u4").tobytes())
        parts.append(bytes([_ACT_TAG[layer.activation]]))
    for layer in net.layers:
        parts.append(layer.weights.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def dense_from_bytes(data: bytes) -> DenseNet:
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(data):
            raise FormatError(f"truncated {what}", offset)
        chunk = data[offset : offset + count]
        offset += count
        return chunk

    if take(4, "magic") != FFN_MAGIC:
        raise FormatError("bad magic", 0)
    (n_layers,) = np.frombuffer(take(4, "layer count"), dtype="<u4")
    if n_layers == 0:
        raise FormatError("zero layers", 4)
    shapes = []
    for _ in range(int(n_layers)):
        at = offset
        in_d, out_d = np.frombuffer(take(8, "layer dims"), dtype="<u4")
        if in_d == 0 or out_d == 0:
            raise FormatError("zero layer dimension", at)
        tag = take(1, "activation tag")[0]
        if tag not in _TAG_ACT:
            raise FormatError(f"unknown activation tag {tag}", offset - 1)
        shapes.append((int(in_d), int(out_d), _TAG_ACT[tag]))
    layers = []
    for in_d, out_d, act in shapes:
        w = np.frombuffer(take(8 * in_d * out_d, "weights"), dtype="<f8")
        b = np.frombuffer(take(8 * out_d, "bias"), dtype="<f8")
        layers.append(Layer(w.reshape(out_d, in_d).copy(), b.copy(), act))
    if offset != len(data):
        raise FormatError("trailing data after payload", offset)
    return DenseNet(layers)


def save_dense(net: DenseNet, path) -> None:
    Path(path).write_bytes(dense_to_bytes(net))


def load_dense(path) -> DenseNet:
    return dense_from_bytes(Path(path).read_bytes())
