"""Dense-network substrate: layers with exact reverse-mode gradients, SGD
with momentum and weight decay, finite-difference gradient checking, and a
versioned binary parameter checkpoint.

Everything runs in double precision on purpose: the gradient-check contract
(max relative error < 1e-4 against central differences) leaves no room for
single-precision noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fileio import atomic_write_bytes

ACTIVATIONS = ("identity", "relu")

CHECKPOINT_MAGIC = b"PCN1"


class NonFiniteGradientError(RuntimeError):
    """An update step saw a NaN/inf gradient; carries the parameter name."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.parameter = name


class CheckpointError(ValueError):
    pass


@dataclass
class DenseLayer:
    """Affine map plus elementwise activation. Weight is (out x in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("weight must be a (out x in) matrix")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def make_layer(rng: np.random.Generator, in_dim: int, out_dim: int,
               activation: str = "identity") -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    return DenseLayer(glorot_uniform(rng, out_dim, in_dim), np.zeros(out_dim), activation)


@dataclass
class Tape:
    """Recorded forward pass of a layer stack; consumable exactly once."""

    input_node: ad.Node
    output_node: ad.Node
    layer_nodes: list
    used: bool = False


@dataclass
class LayerGradients:
    input: np.ndarray
    layers: list  # one (d_weight, d_bias) pair per layer


def forward(layers, x) -> tuple[np.ndarray, Tape]:
    """Run a vector through a DenseLayer stack, recording a tape for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("input must be a vector")
    h = ad.Node(x)
    input_node = h
    pairs = []
    for i, layer in enumerate(layers):
        if ad.value_of(h).shape[0] != layer.in_dim:
            raise ValueError(
                f"layer {i} expects {layer.in_dim} inputs, got {ad.value_of(h).shape[0]}"
            )
        w, b = ad.Node(layer.weight), ad.Node(layer.bias)
        pairs.append((w, b))
        h = ad.add(ad.matmul(w, h), b)
        if layer.activation == "relu":
            h = ad.relu(h)
    if not isinstance(h, ad.Node):  # empty stack
        h = input_node
    return ad.value_of(h).copy(), Tape(input_node, h, pairs)


def backward(tape: Tape, output_gradient) -> LayerGradients:
    """Exact gradients for every layer parameter and the input."""
    if tape.used:
        raise ValueError("stale tape: backward was already run for this forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != tape.output_node.value.shape:
        raise ValueError(
            f"output gradient shape {g.shape} does not match tape output "
            f"{tape.output_node.value.shape}"
        )
    tape.used = True
    ad.backward(tape.output_node, g)

    def grab(node):
        return node.grad if node.grad is not None else np.zeros_like(node.value)

    grads = [(grab(w), grab(b)) for w, b in tape.layer_nodes]
    return LayerGradients(input=grab(tape.input_node), layers=grads)


class ParamStore:
    """Flat registry of named float64 tensors with paired gradient buffers.

    Values are mutated in place by ``sgd_step`` so that any view handed out
    (e.g. a DenseLayer built on a registered array) tracks training.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._velocity: dict[str, np.ndarray] = {}

    def register(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"parameter '{name}' already registered")
        v = np.array(value, dtype=np.float64)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)
        return v

    def names(self) -> list[str]:
        return list(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def leaves(self) -> dict[str, ad.Node]:
        """Fresh leaf Nodes wrapping the live parameter arrays."""
        return {name: ad.Node(v) for name, v in self._values.items()}

    def accumulate(self, leaves: dict[str, ad.Node]) -> None:
        """Add leaf gradients (from a backward pass) into the grad buffers."""
        for name, node in leaves.items():
            if node.grad is not None:
                self._grads[name] += node.grad

    def values_copy(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self._values.items()}

    def load_values(self, mapping) -> None:
        for name, value in mapping.items():
            if name not in self._values:
                raise KeyError(f"unknown parameter '{name}'")
            v = np.asarray(value, dtype=np.float64)
            if v.shape != self._values[name].shape:
                raise ValueError(
                    f"parameter '{name}' has shape {self._values[name].shape}, got {v.shape}"
                )
            self._values[name][...] = v


@dataclass
class SgdConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


def sgd_step(store: ParamStore, config: SgdConfig) -> None:
    """Momentum update with L2 decay folded into the gradient:
    g <- g + wd*theta; v <- m*v + g; theta <- theta - lr*v. Grads are zeroed after.

    Aborts (before touching any parameter) if any gradient is non-finite.
    """
    for name in store.names():
        if not np.all(np.isfinite(store.grad(name))):
            raise NonFiniteGradientError(name)
    for name in store.names():
        theta = store.value(name)
        g = store.grad(name) + config.weight_decay * theta
        v = store._velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
            store._velocity[name] = v
        v *= config.momentum
        v += g
        theta -= config.learning_rate * v
    store.zero_grads()


@dataclass
class GradientCheckReport:
    max_relative_error: float
    worst_parameter: str | None
    per_parameter: dict = field(default_factory=dict)


def gradient_check(store: ParamStore, loss_fn, step: float = 1e-4,
                   samples_per_tensor: int = 10,
                   rng: np.random.Generator | None = None) -> GradientCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` maps a dict name -> tensor (leaf Nodes when traced, plain
    arrays when re-evaluated for differencing) to a scalar. For each
    registered tensor, up to ``samples_per_tensor`` coordinates are probed.
    """
    rng = rng or np.random.default_rng(0)
    leaves = store.leaves()
    out = loss_fn(leaves)
    if not ad.is_node(out):
        raise ValueError("loss_fn must depend on the supplied parameters")
    ad.backward(out)

    plain = {name: store.value(name) for name in store.names()}
    worst, worst_name = 0.0, None
    per_parameter = {}
    for name in store.names():
        theta = store.value(name)
        node = leaves[name]
        analytic = node.grad if node.grad is not None else np.zeros_like(theta)
        count = min(samples_per_tensor, theta.size)
        coords = rng.choice(theta.size, size=count, replace=False)
        local_worst = 0.0
        for j in coords:
            original = theta.flat[j]
            theta.flat[j] = original + step
            loss_plus = float(loss_fn(plain))
            theta.flat[j] = original - step
            loss_minus = float(loss_fn(plain))
            theta.flat[j] = original
            fd = (loss_plus - loss_minus) / (2.0 * step)
            a = float(analytic.flat[j])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            if rel > local_worst:
                local_worst = rel
        per_parameter[name] = local_worst
        if local_worst > worst:
            worst, worst_name = local_worst, name
    return GradientCheckReport(worst, worst_name, per_parameter)


def save_checkpoint(tensors, path) -> None:
    """Write named tensors as: magic ``PCN1`` then, per tensor, u32 name
    length, UTF-8 name, u32 rank, u32 dims, float64 little-endian payload.
    """
    if isinstance(tensors, ParamStore):
        tensors = {name: tensors.value(name) for name in tensors.names()}
    buf = bytearray(CHECKPOINT_MAGIC)
    for name, tensor in tensors.items():
        tensor = np.asarray(tensor, dtype=np.float64)
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", tensor.ndim)
        buf += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        buf += np.ascontiguousarray(tensor, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Inverse of ``save_checkpoint``; round-trips bit-exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic bytes {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    offset = 4
    tensors: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if offset + n > len(data):
            raise CheckpointError(
                f"truncated checkpoint while reading {what}: "
                f"expected {offset + n} bytes, file has {len(data)}"
            )

    while offset < len(data):
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        need(name_len, "name")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        need(4, f"rank of '{name}'")
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        need(4 * rank, f"dims of '{name}'")
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(8 * count, f"payload of '{name}'")
        flat = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        tensors[name] = flat.reshape(dims).astype(np.float64).copy()
    return tensors
