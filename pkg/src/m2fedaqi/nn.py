"""Dense-tensor building blocks with hand-written backward passes.

Tensors are plain ``numpy`` arrays (float32 in normal use; every function is
dtype-preserving so gradient checks can re-run the forward in float64).
Reductions inside layer normalization accumulate in float64.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .errors import CodecError, ConfigError, DimensionError, StructureError

LN_EPS = 1e-5
DEFAULT_DROPOUT = 0.2


def _check_cols(x: np.ndarray, expected: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != expected:
        raise DimensionError(
            f"{what}: input shape {tuple(x.shape)} incompatible with expected (batch, {expected})"
        )


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass
class LinearLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"linear weight {tuple(self.weight.shape)} and bias {tuple(self.bias.shape)} disagree"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class LayerNormLayer:
    gain: np.ndarray
    shift: np.ndarray
    epsilon: float = LN_EPS

    def __post_init__(self):
        if self.gain.shape != self.shift.shape or self.gain.ndim != 1:
            raise DimensionError(
                f"layer norm gain {tuple(self.gain.shape)} and shift {tuple(self.shift.shape)} disagree"
            )
        if not self.epsilon > 0:
            raise ConfigError(f"layer norm epsilon must be > 0, got {self.epsilon}")


def init_linear(rng: np.random.Generator, in_features: int, out_features: int):
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero bias."""
    bound = np.sqrt(1.0 / in_features)
    w = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(np.float32)
    return w, np.zeros(out_features, dtype=np.float32)


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    _check_cols(x, layer.in_features, "linear")
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray, dout: np.ndarray, need_dx: bool = True):
    """Return ``(dx, dweight, dbias)``; ``dx`` is None when not requested."""
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ layer.weight if need_dx else None
    return dx, dw, db


def layer_norm_forward(layer: LayerNormLayer, x: np.ndarray):
    """Normalize each row with its population variance; returns ``(out, cache)``."""
    _check_cols(x, layer.gain.shape[0], "layer_norm")
    mean = x.mean(axis=1, keepdims=True, dtype=np.float64)
    centered = x.astype(np.float64) - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + layer.epsilon)).astype(x.dtype)
    xhat = centered.astype(x.dtype) * inv_std
    out = xhat * layer.gain + layer.shift
    return out, (xhat, inv_std)


def layer_norm_backward(layer: LayerNormLayer, cache, dout: np.ndarray):
    """Return ``(dx, dgain, dshift)``."""
    xhat, inv_std = cache
    dshift = dout.sum(axis=0)
    dgain = (dout * xhat).sum(axis=0)
    dxhat = dout * layer.gain
    d = xhat.shape[1]
    s1 = dxhat.sum(axis=1, keepdims=True, dtype=np.float64)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True, dtype=np.float64)
    dx = (inv_std / d) * (d * dxhat - s1.astype(xhat.dtype) - xhat * s2.astype(xhat.dtype))
    return dx, dgain, dshift


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def check_dropout_rate(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")


def dropout_forward(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout; returns ``(out, mask)`` where mask is None when inactive.

    The mask already contains the ``1/(1-p)`` scale so the backward pass is a
    single multiply.
    """
    check_dropout_rate(p)
    if not train or p == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("train-mode dropout needs a random stream")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * mask, mask


def dropout_backward(mask, dout: np.ndarray) -> np.ndarray:
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class Layout(tuple):
    """Ordered ``(name, shape, offset)`` manifest of a :class:`ParameterSet`."""

    @classmethod
    def from_shapes(cls, shapes) -> "Layout":
        entries, off = [], 0
        for name, shape in shapes:
            e = LayoutEntry(name, tuple(int(s) for s in shape), off)
            entries.append(e)
            off += e.size
        return cls(entries)

    @property
    def total(self) -> int:
        return self[-1].offset + self[-1].size if self else 0

    def digest(self) -> str:
        """Stable hex hash of names and shapes, used to match updates to a model."""
        h = hashlib.sha256()
        for e in self:
            h.update(e.name.encode("utf-8") + b"\x00" + repr(e.shape).encode() + b"\x00")
        return h.hexdigest()[:16]


class ParameterSet(Mapping):
    """Ordered collection of named float32 tensors.

    Gradients use the same container; :meth:`zeros_like` builds one with a
    matching layout.
    """

    def __init__(self, entries=()):
        self._data: dict[str, np.ndarray] = {}
        for name, arr in (entries.items() if isinstance(entries, Mapping) else entries):
            if name in self._data:
                raise StructureError(f"duplicate parameter name {name!r}")
            self._data[name] = np.asarray(arr, dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __setitem__(self, name: str, arr: np.ndarray) -> None:
        if name not in self._data or self._data[name].shape != np.shape(arr):
            raise StructureError(f"cannot assign {name!r}: not in layout or shape differs")
        self._data[name] = np.asarray(arr, dtype=np.float32)

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} entries, {self.size} values)"

    @property
    def layout(self) -> Layout:
        return Layout.from_shapes((k, v.shape) for k, v in self._data.items())

    @property
    def size(self) -> int:
        return sum(int(v.size) for v in self._data.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, v.copy()) for k, v in self._data.items())

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet((k, np.zeros_like(v)) for k, v in self._data.items())

    def allclose(self, other: "ParameterSet", atol: float = 0.0) -> bool:
        if self.layout != other.layout:
            return False
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self)

    def equal(self, other: "ParameterSet") -> bool:
        """Bit-exact comparison (NaN payloads included)."""
        if self.layout != other.layout:
            return False
        return all(self[k].tobytes() == other[k].tobytes() for k in self)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._data.values())


def flatten_params(params: ParameterSet) -> np.ndarray:
    if not len(params):
        return np.zeros(0, dtype=np.float32)
    return np.concatenate([params[k].ravel() for k in params]).astype(np.float32, copy=False)


def restore_params(layout: Layout, vector: np.ndarray) -> ParameterSet:
    vector = np.asarray(vector)
    if vector.ndim != 1 or vector.shape[0] != layout.total:
        raise CodecError(
            f"parameter vector length mismatch: expected {layout.total}, got {vector.size}"
        )
    vector = vector.astype(np.float32, copy=False)
    return ParameterSet(
        (e.name, vector[e.offset : e.offset + e.size].reshape(e.shape).copy()) for e in layout
    )


def sgd_step(params: ParameterSet, grads: ParameterSet, lr: float) -> ParameterSet:
    """Plain SGD, functional: returns ``θ - lr·g`` for every entry."""
    if params.layout != grads.layout:
        raise StructureError("parameter and gradient layouts differ")
    step = np.float32(lr)
    return ParameterSet((k, params[k] - step * grads[k]) for k in params)


class SGD:
    """Stateless plain SGD."""

    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        return sgd_step(params, grads, self.lr)


class Adam:
    """Adam with bias correction; moments live in float32 alongside the model.

    The moment estimates stay with whoever owns the optimizer (a client keeps
    its own across rounds); they are never part of the transmitted weights.
    """

    name = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        if params.layout != grads.layout:
            raise StructureError("parameter and gradient layouts differ")
        if not self.m:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t += 1
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        c1 = np.float32(1.0 - self.beta1**self.t)
        c2 = np.float32(1.0 - self.beta2**self.t)
        lr, eps = np.float32(self.lr), np.float32(self.eps)
        out = []
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            out.append((k, params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + eps)))
        return ParameterSet(out)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(name: str, lr: float):
    try:
        return OPTIMIZERS[name](lr)
    except KeyError:
        raise ConfigError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None


# ---------------------------------------------------------------------------
# Wire / file form
# ---------------------------------------------------------------------------
# u32 entry count, then per entry: u16 name length, UTF-8 name, u8 rank,
# rank x u32 dims; followed by the little-endian float32 payload.


def encode_layout(layout: Layout) -> bytes:
    out = [struct.pack("<I", len(layout))]
    for e in layout:
        name = e.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)) + name)
        out.append(struct.pack("<B", len(e.shape)) + struct.pack(f"<{len(e.shape)}I", *e.shape))
    return b"".join(out)


def decode_layout(buf: bytes, offset: int = 0) -> tuple[Layout, int]:
    """Parse a layout manifest; returns the layout and the offset just past it."""
    try:
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        shapes = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = bytes(buf[offset : offset + nlen]).decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CodecError("truncated parameter name")
            offset += nlen
            (rank,) = struct.unpack_from("<B", buf, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", buf, offset)
            offset += 4 * rank
            shapes.append((name, dims))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CodecError(f"malformed parameter layout: {exc}") from exc
    return Layout.from_shapes(shapes), offset


def params_to_bytes(params: ParameterSet) -> bytes:
    return encode_layout(params.layout) + flatten_params(params).astype("<f4").tobytes()


def params_from_bytes(buf: bytes, offset: int = 0) -> ParameterSet:
    layout, offset = decode_layout(buf, offset)
    expected = 4 * layout.total
    actual = len(buf) - offset
    if actual != expected:
        raise CodecError(f"parameter payload length mismatch: expected {expected} bytes, got {actual}")
    vec = np.frombuffer(buf, dtype="<f4", count=layout.total, offset=offset)
    return restore_params(layout, vec.astype(np.float32))
