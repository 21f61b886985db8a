"""MLP embedding network with unit-normalized outputs.

The same architecture serves as the pretrained guiding network and as the
distilled network. Gradients are hand-derived (including through the output
L2 normalization) and verified against central finite differences in the
test suite. Training uses SGD with momentum.

Checkpoint format (little-endian): magic "TLCK", version u16 = 1, flags u16
(bit 0: optimizer velocity present), config JSON (u32 length prefix), then
f64 parameter tensors in declaration order (W0, b0, W1, b1, ...), followed
by velocity tensors in the same order when flagged.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError, NumericError

_NORM_EPS = 1e-12
CKPT_MAGIC = b"TLCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHHI")
_FLAG_VELOCITY = 1

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    embed_dim: int
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if len(self.hidden_dims) < 1:
            raise ConfigError("at least one hidden layer is required")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden dims must be positive")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {_ACTIVATIONS}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim)
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class EncoderParams:
    """Per-layer weights and biases, float64."""

    config: EncoderConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


Grads = tuple[list[np.ndarray], list[np.ndarray]]


def init_params(config: EncoderConfig) -> EncoderParams:
    """Weights ~ N(0, 1/fan_in), biases zero. Deterministic in config.seed."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return EncoderParams(config, weights, biases)


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    return np.tanh(a)


def _activate_grad(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    t = np.tanh(a)
    return 1.0 - t * t


def _forward_cached(params: EncoderParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise DimensionError(
            f"input shape {x.shape}, expected (n, {params.config.input_dim})"
        )
    act = params.config.activation
    pre = []
    h = x
    hidden = [h]
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        pre.append(a)
        if l < last:
            h = _activate(a, act)
            hidden.append(h)
    out = pre[-1]
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    guarded = np.maximum(norms, _NORM_EPS)
    y = out / guarded
    return y, pre, hidden, norms, guarded


def forward(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Embed a batch: rows of the result are L2-normalized (epsilon-guarded)."""
    return _forward_cached(params, x)[0]


def grad(params: EncoderParams, x: np.ndarray, adjoint: np.ndarray) -> Grads:
    """Exact parameter gradients of sum(adjoint * forward(params, x)).

    ``adjoint`` is the gradient of the scalar loss with respect to the
    normalized embeddings.
    """
    y, pre, hidden, norms, guarded = _forward_cached(params, x)
    adjoint = np.asarray(adjoint, dtype=np.float64)
    if adjoint.shape != y.shape:
        raise DimensionError(f"adjoint shape {adjoint.shape}, expected {y.shape}")
    act = params.config.activation

    # Through y = out / max(||out||, eps): on the guarded branch the
    # denominator is a constant, so the Jacobian is just 1/eps.
    row_dot = np.sum(adjoint * y, axis=1, keepdims=True)
    unguarded = norms >= _NORM_EPS
    d_out = np.where(unguarded, (adjoint - row_dot * y) / guarded, adjoint / _NORM_EPS)

    n_layers = len(params.weights)
    d_weights = [np.empty(0)] * n_layers
    d_biases = [np.empty(0)] * n_layers
    delta = d_out
    for l in range(n_layers - 1, -1, -1):
        d_weights[l] = hidden[l].T @ delta
        d_biases[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l].T) * _activate_grad(pre[l - 1], act)
    return d_weights, d_biases


def zero_grads(params: EncoderParams) -> Grads:
    return (
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def add_grads(a: Grads, b: Grads) -> Grads:
    return (
        [x + y for x, y in zip(a[0], b[0])],
        [x + y for x, y in zip(a[1], b[1])],
    )


def scale_grads(g: Grads, s: float) -> Grads:
    return [w * s for w in g[0]], [b * s for b in g[1]]


def zero_velocity(params: EncoderParams) -> Grads:
    return zero_grads(params)


def sgd_step(
    params: EncoderParams,
    grads: Grads,
    lr: float,
    momentum: float,
    velocity: Grads,
) -> tuple[EncoderParams, Grads]:
    """v <- momentum * v + g; p <- p - lr * v. Returns new params and state."""
    if not lr > 0:
        raise ConfigError("lr must be > 0")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError("momentum must be in [0, 1)")
    gw, gb = grads
    for g in (*gw, *gb):
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in sgd_step")
    vw = [momentum * v + g for v, g in zip(velocity[0], gw)]
    vb = [momentum * v + g for v, g in zip(velocity[1], gb)]
    new = EncoderParams(
        params.config,
        [p - lr * v for p, v in zip(params.weights, vw)],
        [p - lr * v for p, v in zip(params.biases, vb)],
    )
    return new, (vw, vb)


def _config_to_json(config: EncoderConfig) -> bytes:
    return json.dumps(
        {
            "input_dim": config.input_dim,
            "hidden_dims": list(config.hidden_dims),
            "embed_dim": config.embed_dim,
            "activation": config.activation,
            "seed": config.seed,
        },
        sort_keys=True,
    ).encode("utf-8")


def _config_from_json(blob: bytes) -> EncoderConfig:
    try:
        d = json.loads(blob.decode("utf-8"))
        return EncoderConfig(
            input_dim=d["input_dim"],
            hidden_dims=tuple(d["hidden_dims"]),
            embed_dim=d["embed_dim"],
            activation=d["activation"],
            seed=d["seed"],
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"invalid checkpoint config: {exc}") from exc


def save_checkpoint(
    path: str | Path,
    params: EncoderParams,
    velocity: Grads | None = None,
) -> None:
    cfg_blob = _config_to_json(params.config)
    flags = _FLAG_VELOCITY if velocity is not None else 0
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, flags, len(cfg_blob)))
        fh.write(cfg_blob)
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        if velocity is not None:
            for w, b in zip(velocity[0], velocity[1]):
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, Grads | None]:
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: file shorter than header")
    magic, version, flags, cfg_len = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    if len(blob) < off + cfg_len:
        raise CheckpointError(f"{path}: truncated config block")
    config = _config_from_json(blob[off : off + cfg_len])
    off += cfg_len

    def read_tensors():
        ws, bs = [], []
        nonlocal off
        for fan_in, fan_out in config.layer_dims:
            need = 8 * (fan_in * fan_out + fan_out)
            if len(blob) < off + need:
                raise CheckpointError(f"{path}: truncated tensor payload")
            w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off)
            off += 8 * fan_in * fan_out
            b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
            off += 8 * fan_out
            ws.append(w.reshape(fan_in, fan_out).copy())
            bs.append(b.copy())
        return ws, bs

    weights, biases = read_tensors()
    velocity = None
    if flags & _FLAG_VELOCITY:
        velocity = read_tensors()
    if len(blob) != off:
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return EncoderParams(config, weights, biases), velocity
