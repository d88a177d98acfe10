"""MLP backbone f, linear heads g and h, Nesterov SGD, EMA shadow, checkpoints.

Parameters live in a flat, ordered name -> float64 array mapping:

    f.<i>.weight  (d_in x d_out)   f.<i>.bias  (1 x d_out)
    g.weight      (d x C)          g.bias      (1 x C)
    h.weight      (d x d)          h.bias      (1 x d)

Rows are examples, so every affine map is ``x @ W + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, add, matmul, relu

CHECKPOINT_MAGIC = b"SFOS"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(IOError):
    pass


class ModelParams:
    """Ordered collection of named parameter arrays."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    def weight_names(self) -> list[str]:
        return [k for k in self._arrays if k.endswith(".weight")]

    @property
    def depth(self) -> int:
        return sum(1 for k in self._arrays if k.startswith("f.") and k.endswith(".weight"))

    def copy(self) -> "ModelParams":
        return ModelParams(self._arrays)

    def as_leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self._arrays.items()}

    def as_constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self._arrays.items()}

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return self.names() == other.names() and all(
            np.allclose(self[k], other[k], **kw) for k in self)

    def equal(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self)


def init_params(seed: int, input_dim: int, hidden_sizes: Sequence[int], feature_dim: int,
                num_classes: int) -> ModelParams:
    """He-uniform weights (variance 2/fan_in), zero biases."""
    dims = [input_dim, *hidden_sizes, feature_dim]
    if any(int(d) < 1 for d in [*dims, num_classes]):
        raise ConfigError(f"all layer sizes must be >= 1, got dims={dims}, classes={num_classes}")
    rng = np.random.default_rng(seed)

    def he(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    arrays: dict[str, np.ndarray] = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        arrays[f"f.{i}.weight"] = he(a, b)
        arrays[f"f.{i}.bias"] = np.zeros((1, b))
    arrays["g.weight"] = he(feature_dim, num_classes)
    arrays["g.bias"] = np.zeros((1, num_classes))
    arrays["h.weight"] = he(feature_dim, feature_dim)
    arrays["h.bias"] = np.zeros((1, feature_dim))
    return ModelParams(arrays)


def _as_tensors(params) -> Mapping[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.as_constants()
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match layer width {w.shape[0]}")
    return add(matmul(x, w), b)


def forward_features(params, x) -> Tensor:
    """Backbone f: affine layers with relu in between, linear last layer."""
    p = _as_tensors(params)
    depth = sum(1 for k in p if k.startswith("f.") and k.endswith(".weight"))
    out = x if isinstance(x, Tensor) else Tensor(x)
    for i in range(depth):
        out = _affine(out, p[f"f.{i}.weight"], p[f"f.{i}.bias"])
        if i < depth - 1:
            out = relu(out)
    return out


def forward_logits(params, feats: Tensor) -> Tensor:
    p = _as_tensors(params)
    return _affine(feats, p["g.weight"], p["g.bias"])


def project(params, v: Tensor) -> Tensor:
    p = _as_tensors(params)
    return _affine(v, p["h.weight"], p["h.bias"])


def predict_logits(params, x) -> np.ndarray:
    """g(f(x)) as a plain array, no graph kept."""
    return forward_logits(params, forward_features(params, x)).values


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    momentum: float = 0.9
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams, momentum: float = 0.9) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, momentum, 0)


def sgd_nesterov_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: OptimizerState,
                      lr: float) -> tuple[ModelParams, OptimizerState]:
    """v <- m*v + g;  theta <- theta - lr*(g + m*v)."""
    if not lr >= 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    m = state.momentum
    new_params: dict[str, np.ndarray] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        v = m * state.velocity[name] + g
        new_velocity[name] = v
        new_params[name] = theta - lr * (g + m * v)
    return ModelParams(new_params), OptimizerState(new_velocity, m, state.step + 1)


@dataclass
class EmaShadow:
    params: ModelParams
    momentum: float = 0.999

    @classmethod
    def of(cls, params: ModelParams, momentum: float = 0.999) -> "EmaShadow":
        return cls(params.copy(), momentum)


def ema_update(shadow: EmaShadow, params: ModelParams, m_ema: float | None = None) -> EmaShadow:
    """shadow <- m*shadow + (1-m)*params, entrywise."""
    m = shadow.momentum if m_ema is None else m_ema
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {m}")
    blended = {k: m * shadow.params[k] + (1.0 - m) * params[k] for k in shadow.params}
    return EmaShadow(ModelParams(blended), shadow.momentum)


# --- checkpoint file -------------------------------------------------------
#
# little-endian: magic "SFOS" | u32 version | u32 count |
#   count x (u32 name_len | name utf-8 | u32 rank | rank x u32 dim | float64 payload)

def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after {count} entries")
    return out
