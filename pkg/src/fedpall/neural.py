"""Minimal dense MLP engine: forward pass, exact backprop, SGD, serialization.

Weights are stored ``(fan_in, fan_out)`` so a layer computes ``h @ W + b`` on
row-major batches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError

_PARAMS_MAGIC = b"FPMLP"
_PARAMS_VERSION = 1
_OUTPUT_HEADS = ("linear", "softmax")
_ACTIVATIONS = ("relu",)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return an independent PCG64 stream keyed by ``(seed, *keys)``.

    The same key tuple always yields the same stream, so streams derived per
    client do not depend on the order in which clients are processed.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    hidden_activation: str = "relu"
    output_head: str = "linear"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"layer_dims needs >= 2 positive entries, got {dims}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_head not in _OUTPUT_HEADS:
            raise ValueError(f"unsupported output head {self.output_head!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise DimensionError("parameter list length does not match the spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.spec.layer_dims[i], self.spec.layer_dims[i + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise DimensionError(f"layer {i}: got W{w.shape} b{b.shape}, expected W{shape}")

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.spec, [np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Parameters interleaved as ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        new = self.zeros_like()
        pos = 0
        for a in new.arrays():
            a[...] = flat[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        if pos != flat.size:
            raise DimensionError(f"flat vector has {flat.size} entries, expected {pos}")
        return new

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(self.spec, [w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases])

    def equals(self, other: "MlpParams") -> bool:
        """Bitwise equality of spec and every parameter array."""
        return self.spec == other.spec and all(
            a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class ForwardCache:
    spec: MlpSpec
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None


def init_mlp(spec: MlpSpec, rng: np.random.Generator, dtype=np.float64) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(spec, weights, biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; accepts 1-D or 2-D input."""
    z = np.asarray(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def forward_mlp(params: MlpParams, x: np.ndarray, cache: bool = False):
    """Run the network on a ``(batch, d_in)`` matrix.

    Returns ``(output, cache)``; ``cache`` is ``None`` unless requested.
    """
    spec = params.spec
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"input shape {x.shape} incompatible with input dim {spec.input_dim}")
    fc = ForwardCache(spec) if cache else None
    h = x
    last = spec.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        if fc is not None:
            fc.layer_inputs.append(h)
            fc.pre_activations.append(a)
        h = np.maximum(a, 0.0) if i < last else a
    if spec.output_head == "softmax":
        h = softmax(h)
    if fc is not None:
        fc.output = h
    return h, fc


def backward_mlp(params: MlpParams, cache: ForwardCache | None, output_grad: np.ndarray,
                 need_param_grads: bool = True):
    """Backpropagate ``dL/d(output)``.

    Returns ``(param_gradients, input_gradient)``; ``param_gradients`` is
    ``None`` when ``need_param_grads`` is false (frozen networks).
    """
    if cache is None or cache.spec != params.spec or cache.output is None:
        raise UsageError("backward_mlp needs the cache from a matching forward_mlp(..., cache=True)")
    if output_grad.shape != cache.output.shape:
        raise DimensionError(f"output gradient {output_grad.shape} vs output {cache.output.shape}")
    g = output_grad
    if params.spec.output_head == "softmax":
        p = cache.output
        g = p * (g - np.sum(g * p, axis=1, keepdims=True))
    n = params.spec.n_layers
    gw: list[np.ndarray] = [None] * n
    gb: list[np.ndarray] = [None] * n
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (cache.pre_activations[i] > 0)
        if need_param_grads:
            gw[i] = cache.layer_inputs[i].T @ g
            gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    grads = MlpParams(params.spec, gw, gb) if need_param_grads else None
    return grads, g


def sgd_step(params: MlpParams, grads: MlpParams, learning_rate: float) -> MlpParams:
    """Return ``p - lr * g`` as a new parameter set."""
    if grads.spec != params.spec:
        raise DimensionError("gradient spec does not match parameter spec")
    if learning_rate == 0:
        return params.copy()
    return MlpParams(params.spec,
                     [w - learning_rate * gw for w, gw in zip(params.weights, grads.weights)],
                     [b - learning_rate * gb for b, gb in zip(params.biases, grads.biases)])


def serialize_params(params: MlpParams) -> bytes:
    """Versioned little-endian binary record: header, dims, then row-major arrays."""
    spec = params.spec
    dtype = np.dtype(params.dtype).newbyteorder("<")
    parts = [
        _PARAMS_MAGIC,
        struct.pack("<HBBBB", _PARAMS_VERSION, _ACTIVATIONS.index(spec.hidden_activation),
                    _OUTPUT_HEADS.index(spec.output_head), dtype.itemsize, 0),
        struct.pack("<I", len(spec.layer_dims)),
        struct.pack(f"<{len(spec.layer_dims)}I", *spec.layer_dims),
    ]
    parts.extend(np.ascontiguousarray(a, dtype=dtype).tobytes() for a in params.arrays())
    return b"".join(parts)


def deserialize_params(blob: bytes) -> MlpParams:
    if blob[:len(_PARAMS_MAGIC)] != _PARAMS_MAGIC:
        raise ValueError("not a serialized MlpParams record")
    pos = len(_PARAMS_MAGIC)
    version, act, head, itemsize, _ = struct.unpack_from("<HBBBB", blob, pos)
    if version != _PARAMS_VERSION:
        raise ValueError(f"unsupported MlpParams version {version}")
    pos += 6
    (n_dims,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    dims = struct.unpack_from(f"<{n_dims}I", blob, pos)
    pos += 4 * n_dims
    spec = MlpSpec(dims, _ACTIVATIONS[act], _OUTPUT_HEADS[head])
    dtype = np.dtype({4: "<f4", 8: "<f8"}[itemsize])
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape, dest in (((fan_in, fan_out), weights), ((fan_out,), biases)):
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape)
            dest.append(arr.astype(dtype.newbyteorder("="), copy=True))
            pos += count * dtype.itemsize
    if pos != len(blob):
        raise ValueError(f"trailing bytes in MlpParams record ({len(blob) - pos})")
    return MlpParams(spec, weights, biases)
