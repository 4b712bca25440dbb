"""Dense feed-forward networks with hand-written reverse-mode gradients and Adam.

Only the fixed architecture the package needs: a stack of affine layers with a
``tanh`` or ``relu`` hidden activation and a linear output layer. All arithmetic
is float64.

Binary network format (little-endian throughout)::

    offset  size       field
    0       4          magic  b"NDCN"
    4       2          format version (uint16, currently 1)
    6       1          activation code (uint8: 0 = tanh, 1 = relu)
    7       1          reserved, zero
    8       4          number of layers L (uint32)
    12      8*L        per layer: input width, output width (2 x uint32)
    ...                per layer: weight matrix (in x out, row-major float64),
                       then bias vector (out float64)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NDCN"
FORMAT_VERSION = 1
_ACTIVATIONS = {"tanh": 0, "relu": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATIONS.items()}


class NonFiniteError(FloatingPointError):
    """Raised when a gradient, adjoint or parameter stops being finite."""


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Gradients:
    params: list[np.ndarray]  # aligned with DenseNetwork.params()
    input: np.ndarray


class DenseNetwork:
    """Multi-layer perceptron ``R^in -> R^out`` with a linear output layer."""

    def __init__(self, sizes, activation: str = "tanh", rng: np.random.Generator | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        rng = np.random.default_rng(0) if rng is None else rng
        self.layers: list[Layer] = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
            self.layers.append(Layer(w, np.zeros(n_out)))

    @classmethod
    def from_layers(cls, layers: list[Layer], activation: str = "tanh") -> "DenseNetwork":
        for a, b in zip(layers[:-1], layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError("consecutive layer widths do not match")
        net = cls.__new__(cls)
        net.activation = activation
        net.layers = [Layer(np.array(l.weight, dtype=np.float64), np.array(l.bias, dtype=np.float64))
                      for l in layers]
        return net

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNetwork":
        return DenseNetwork.from_layers(self.layers, self.activation)

    def _act(self, a):
        if self.activation == "tanh":
            return np.tanh(a)
        return np.maximum(a, 0.0)

    def _act_grad(self, h):
        # Expressed through the activation output h.
        if self.activation == "tanh":
            return 1.0 - h * h
        return (h > 0.0).astype(np.float64)

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"input width {x.shape[-1]} does not match network input {self.n_in}")
        return x, single

    def forward(self, x) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass returning the output and the per-layer inputs."""
        h, single = self._check_input(x)
        cache = [h]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            a = h @ layer.weight + layer.bias
            h = a if i == last else self._act(a)
            if i != last:
                cache.append(h)
        return (h[0] if single else h), cache

    def backward(self, x, adjoint, cache: list[np.ndarray] | None = None) -> Gradients:
        """Gradients of ``sum(adjoint * forward(x))`` w.r.t. parameters and input."""
        x2, single = self._check_input(x)
        g = np.asarray(adjoint, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != (x2.shape[0], self.n_out):
            raise ValueError(f"adjoint shape {g.shape} does not match output {(x2.shape[0], self.n_out)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite output adjoint")
        if cache is None:
            _, cache = self.forward_cached(x2)
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h_in = cache[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weight.T
            if i > 0:
                g = g * self._act_grad(h_in)
        return Gradients(grads, g[0] if single else g)

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HBBI", FORMAT_VERSION, _ACTIVATIONS[self.activation], 0,
                                    len(self.layers))]
        for layer in self.layers:
            parts.append(struct.pack("<II", layer.n_in, layer.n_out))
        for layer in self.layers:
            parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["DenseNetwork", int]:
        """Decode a network starting at ``offset``; returns it and the end offset."""
        if buf[offset:offset + 4] != MAGIC:
            raise ValueError("bad network magic")
        version, act, _, n_layers = struct.unpack_from("<HBBI", buf, offset + 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {version}")
        pos = offset + 12
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", buf, pos))
            pos += 8
        layers = []
        for n_in, n_out in shapes:
            w = np.frombuffer(buf, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_in, n_out)
            pos += 8 * n_in * n_out
            b = np.frombuffer(buf, dtype="<f8", count=n_out, offset=pos)
            pos += 8 * n_out
            layers.append(Layer(w.astype(np.float64), b.astype(np.float64)))
        return cls.from_layers(layers, _ACTIVATION_NAMES[act]), pos

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DenseNetwork":
        net, _ = cls.from_bytes(Path(path).read_bytes())
        return net


def forward(net: DenseNetwork, x) -> np.ndarray:
    return net.forward(x)


def backward(net: DenseNetwork, x, adjoint) -> Gradients:
    return net.backward(x, adjoint)


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Non-finite gradients are refused: nothing is modified and
    :class:`NonFiniteError` is raised.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; update refused")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(p)):
            raise NonFiniteError("parameters became non-finite after update")
    return params, state


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm
