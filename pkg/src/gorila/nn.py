"""Dense MLP Q-network with exact backprop over a flat parameter vector.

Every network keeps its weights as views into a single contiguous array so
that parameters can be shipped, sharded and checkpointed without copying
layer by layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

RECTIFIER = "rectifier"
IDENTITY = "identity"

CHECKPOINT_MAGIC = b"GRLA"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input or slice dimensions do not match what the network expects."""


class LayoutError(ValueError):
    """Two parameter vectors do not share the same layer layout."""


@dataclass(frozen=True)
class LayerSlot:
    name: str
    shape: tuple[int, ...]
    offset: int
    length: int


@dataclass(frozen=True)
class Layout:
    slots: tuple[LayerSlot, ...]

    def __post_init__(self):
        expected = 0
        for slot in self.slots:
            if slot.offset != expected:
                raise LayoutError(f"slot {slot.name} starts at {slot.offset}, expected {expected}")
            if slot.length != int(np.prod(slot.shape, dtype=np.int64)):
                raise LayoutError(f"slot {slot.name} length does not match shape {slot.shape}")
            expected += slot.length

    @property
    def total(self) -> int:
        return sum(s.length for s in self.slots)

    @classmethod
    def from_shapes(cls, named_shapes: Sequence[tuple[str, tuple[int, ...]]]) -> "Layout":
        slots = []
        offset = 0
        for name, shape in named_shapes:
            length = int(np.prod(shape, dtype=np.int64))
            slots.append(LayerSlot(name, tuple(int(d) for d in shape), offset, length))
            offset += length
        return cls(tuple(slots))


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.total:
            raise ShapeError(
                f"values have shape {self.values.shape}, layout needs ({self.layout.total},)"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def view(self, name: str) -> np.ndarray:
        for slot in self.layout.slots:
            if slot.name == name:
                return self.values[slot.offset:slot.offset + slot.length].reshape(slot.shape)
        raise KeyError(name)

    def __len__(self):
        return self.layout.total


def mlp_layout(sizes: Sequence[int]) -> Layout:
    """Layout for an MLP with layer widths ``sizes`` (input first, actions last)."""
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least an input and an output size")
    shapes = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes.append((f"fc{i}.weight", (n_out, n_in)))
        shapes.append((f"fc{i}.bias", (n_out,)))
    return Layout.from_shapes(shapes)


def sizes_from_layout(layout: Layout) -> list[int]:
    """Recover layer widths from an MLP layout (inverse of :func:`mlp_layout`)."""
    weights = [s for s in layout.slots if s.name.endswith(".weight")]
    if not weights or mlp_layout([weights[0].shape[1]] + [w.shape[0] for w in weights]) != layout:
        raise LayoutError("layout is not a plain MLP layout")
    return [weights[0].shape[1]] + [w.shape[0] for w in weights]


class QNetwork:
    """Feedforward Q(s, .; theta) with rectifier hidden layers and a linear head.

    ``sizes`` is ``[obs_dim, hidden..., n_actions]``. Weights are uniform in
    +-1/sqrt(fan_in) when no parameters are supplied.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        params: ParamVector | None = None,
        seed: int | None = None,
        dtype=np.float64,
    ):
        self.sizes = [int(s) for s in sizes]
        self.layout = mlp_layout(self.sizes)
        self.dtype = np.dtype(dtype)
        if params is None:
            values = _uniform_init(self.layout, self.sizes, np.random.default_rng(seed))
        else:
            if params.layout != self.layout:
                raise LayoutError("parameter layout does not match network sizes")
            values = params.values
        self.params = ParamVector(np.array(values, dtype=self.dtype, copy=True), self.layout)
        self._bind()

    def _bind(self):
        self.weights = []
        self.biases = []
        for i in range(len(self.sizes) - 1):
            self.weights.append(self.params.view(f"fc{i}.weight"))
            self.biases.append(self.params.view(f"fc{i}.bias"))

    @classmethod
    def from_params(cls, params: ParamVector, dtype=np.float64) -> "QNetwork":
        return cls(sizes_from_layout(params.layout), params=params, dtype=dtype)

    @property
    def layers(self) -> list[tuple[int, int, str]]:
        n = len(self.sizes) - 1
        return [
            (self.sizes[i], self.sizes[i + 1], IDENTITY if i == n - 1 else RECTIFIER)
            for i in range(n)
        ]

    @property
    def n_actions(self) -> int:
        return self.sizes[-1]

    @property
    def obs_dim(self) -> int:
        return self.sizes[0]

    def _check_states(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=self.dtype)
        if states.ndim != 2 or states.shape[1] != self.obs_dim:
            raise ShapeError(f"expected states of shape (B, {self.obs_dim}), got {states.shape}")
        return states

    def _forward_trace(self, states: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        acts = [states]
        pre = []
        last = len(self.weights) - 1
        x = states
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = x @ w.T + b
            pre.append(z)
            x = z if i == last else np.maximum(z, 0.0)
            acts.append(x)
        return acts, pre

    def forward(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=self.dtype)
        if state.ndim != 1 or state.shape[0] != self.obs_dim:
            raise ShapeError(f"expected state of dim {self.obs_dim}, got shape {state.shape}")
        return self.forward_batch(state[None, :])[0]

    def forward_batch(self, states) -> np.ndarray:
        acts, _ = self._forward_trace(self._check_states(states))
        return acts[-1]

    def gradient_batch(self, states, actions, upstream) -> np.ndarray:
        """Flat sum over the batch of ``upstream[i] * grad_theta Q(s_i, a_i)``."""
        states = self._check_states(states)
        actions = np.asarray(actions, dtype=np.int64)
        upstream = np.asarray(upstream, dtype=self.dtype)
        batch = states.shape[0]
        if actions.shape != (batch,) or upstream.shape != (batch,):
            raise ShapeError("actions and upstream must have one entry per state")
        if batch and (actions.min() < 0 or actions.max() >= self.n_actions):
            raise IndexError(f"action index out of range [0, {self.n_actions})")

        acts, pre = self._forward_trace(states)
        grad = np.zeros(self.layout.total, dtype=self.dtype)
        delta = np.zeros((batch, self.n_actions), dtype=self.dtype)
        delta[np.arange(batch), actions] = upstream
        for i in range(len(self.weights) - 1, -1, -1):
            w_slot = self.layout.slots[2 * i]
            b_slot = self.layout.slots[2 * i + 1]
            grad[w_slot.offset:w_slot.offset + w_slot.length] = (delta.T @ acts[i]).ravel()
            grad[b_slot.offset:b_slot.offset + b_slot.length] = delta.sum(axis=0)
            if i:
                # rectifier subgradient at exactly 0 is 0
                delta = (delta @ self.weights[i]) * (pre[i - 1] > 0)
        return grad

    def backward(self, state, action: int, upstream: float) -> ParamVector:
        state = np.asarray(state, dtype=self.dtype)
        if state.ndim != 1 or state.shape[0] != self.obs_dim:
            raise ShapeError(f"expected state of dim {self.obs_dim}, got shape {state.shape}")
        if not 0 <= int(action) < self.n_actions:
            raise IndexError(f"action {action} out of range [0, {self.n_actions})")
        grad = self.gradient_batch(state[None, :], [int(action)], [upstream])
        return ParamVector(grad, self.layout)

    def sync_from(self, src: ParamVector) -> None:
        if src.layout != self.layout:
            raise LayoutError("cannot sync from a vector with a different layout")
        self.params.values[:] = src.values

    def load_flat(self, values: np.ndarray) -> None:
        if values.shape != self.params.values.shape:
            raise LayoutError(f"flat vector of shape {values.shape} does not fit {self.layout.total}")
        self.params.values[:] = values

    def flatten(self) -> ParamVector:
        return self.params.copy()

    def clone(self) -> "QNetwork":
        return QNetwork(self.sizes, params=self.params, dtype=self.dtype)


def _uniform_init(layout: Layout, sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    values = np.empty(layout.total, dtype=np.float64)
    for slot in layout.slots:
        layer = int(slot.name[2:slot.name.index(".")])
        bound = 1.0 / np.sqrt(sizes[layer])
        values[slot.offset:slot.offset + slot.length] = rng.uniform(-bound, bound, slot.length)
    return values


def forward(net: QNetwork, state) -> np.ndarray:
    return net.forward(state)


def backward(net: QNetwork, state, action: int, upstream: float) -> ParamVector:
    return net.backward(state, action, upstream)


def flatten_copy(net: QNetwork) -> ParamVector:
    return net.flatten()


def sync_from(src: ParamVector, dst: QNetwork) -> None:
    dst.sync_from(src)


@dataclass
class AdaGradState:
    accumulators: np.ndarray
    lr: float = 0.05
    eps: float = 1e-8
    steps: int = field(default=0)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("AdaGrad needs a positive learning rate and stabilizer")

    @classmethod
    def zeros(cls, n: int, lr: float = 0.05, eps: float = 1e-8) -> "AdaGradState":
        return cls(np.zeros(n, dtype=np.float64), lr=lr, eps=eps)


def adagrad_apply(params: np.ndarray, grad: np.ndarray, state: AdaGradState) -> np.ndarray:
    """In-place AdaGrad step on ``params``; also updates ``state``.

    ``params`` may be a view (a shard slice); it is returned for chaining.
    """
    if params.shape != grad.shape or params.shape != state.accumulators.shape:
        raise ShapeError(
            f"adagrad shapes differ: params {params.shape}, grad {grad.shape}, "
            f"accumulators {state.accumulators.shape}"
        )
    state.accumulators += grad * grad
    params -= state.lr * grad / (np.sqrt(state.accumulators) + state.eps)
    state.steps += 1
    return params


# --- checkpoint file -----------------------------------------------------


def save_checkpoint(path: str | Path, params: ParamVector) -> None:
    """Write ``params`` as a GRLA checkpoint (layer table then little-endian f64)."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<II", CHECKPOINT_VERSION, len(params.layout.slots))
    for slot in params.layout.slots:
        name = slot.name.encode("utf-8")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<I", len(slot.shape))
        out += struct.pack(f"<{len(slot.shape)}Q", *slot.shape)
        out += struct.pack("<QQ", slot.offset, slot.length)
    out += np.asarray(params.values, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> ParamVector:
    return decode_checkpoint(Path(path).read_bytes())


def decode_checkpoint(data: bytes) -> ParamVector:
    if data[:4] != CHECKPOINT_MAGIC:
        raise LayoutError("not a GRLA checkpoint")
    try:
        version, n_slots = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise LayoutError(f"unsupported checkpoint version {version}")
        pos = 12
        slots = []
        for _ in range(n_slots):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            offset, length = struct.unpack_from("<QQ", data, pos)
            pos += 16
            slots.append(LayerSlot(name, tuple(shape), offset, length))
    except struct.error as exc:
        raise LayoutError(f"truncated checkpoint header: {exc}") from None
    layout = Layout(tuple(slots))
    body = data[pos:]
    if len(body) != 8 * layout.total:
        raise LayoutError(f"checkpoint body has {len(body)} bytes, expected {8 * layout.total}")
    return ParamVector(np.frombuffer(body, dtype="<f8").astype(np.float64), layout)
