"""Small deterministic classifier: tanh MLP feature extractor + linear head.

Forward, softmax and the backward pass are hand-rolled over float64 numpy
arrays so gradients are analytic and runs are bit-reproducible.  Parameter
arithmetic (SGD step, EMA blend) always returns new values; inputs are never
mutated.

Parameter files use a documented portable layout::

    magic  b"SSDAMLP1"
    u32 LE input_dim
    u32 LE n_hidden, then u32 LE per hidden dim
    u32 LE num_classes
    per layer (hidden layers first, classifier last):
        f64 LE x (out*in)  weight matrix, row-major
        f64 LE x out       bias vector

A sidecar ``<path>.json`` carries run metadata (stage, iteration, config
hash, seed).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import substream

PARAMS_MAGIC = b"SSDAMLP1"


class ShapeError(ValueError):
    """Input or parameter dimensions do not line up."""


class TrainingFault(RuntimeError):
    """Non-finite values crept into training."""

    def __init__(self, message: str, layer: int | None = None, iteration: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, truncated, or from another version."""


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all architecture dimensions must be positive, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, classifier last."""
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelParams:
    arch: Arch
    layers: list[tuple[np.ndarray, np.ndarray]]  # (W[out, in], b[out])

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [(W.copy(), b.copy()) for W, b in self.layers])

    def validate(self) -> None:
        expected = self.arch.layer_dims
        if len(self.layers) != len(expected):
            raise ShapeError(f"expected {len(expected)} layers, got {len(self.layers)}")
        for k, ((W, b), (fan_in, fan_out)) in enumerate(zip(self.layers, expected)):
            if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ShapeError(
                    f"layer {k}: weights {W.shape} / bias {b.shape} do not match "
                    f"arch dims ({fan_out}, {fan_in})"
                )
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ShapeError(f"layer {k}: non-finite parameter values")


@dataclass
class Gradients:
    layers: list[tuple[np.ndarray, np.ndarray]]

    @staticmethod
    def zeros(params: ModelParams) -> "Gradients":
        return Gradients([(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers])

    def axpy(self, other: "Gradients", weight: float) -> None:
        """In-place self += weight * other."""
        if len(self.layers) != len(other.layers):
            raise ShapeError("gradient layer counts differ")
        for (W, b), (oW, ob) in zip(self.layers, other.layers):
            W += weight * oW
            b += weight * ob

    def scaled(self, weight: float) -> "Gradients":
        return Gradients([(weight * W, weight * b) for W, b in self.layers])


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class ForwardCache:
    """Recorded per-layer inputs of one batch forward pass.

    ``inputs[0]`` is the raw batch; ``inputs[k]`` for k >= 1 is the tanh
    output feeding layer k.  That is everything backward() needs.
    """

    inputs: list[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray


def init_params(arch: Arch, seed: int) -> ModelParams:
    """Seeded Glorot-uniform weights, zero biases."""
    rng = substream(int(seed), "model-init")
    layers = []
    for fan_in, fan_out in arch.layer_dims:
        a = math.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-a, a, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((W, b))
    return ModelParams(arch, layers)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _as_batch(x: np.ndarray, input_dim: int) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != input_dim:
        raise ShapeError(f"expected batch of shape (B, {input_dim}), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("input features must be finite")
    return X


def forward_batch(params: ModelParams, X: np.ndarray) -> ForwardCache:
    X = _as_batch(X, params.arch.input_dim)
    inputs = [X]
    act = X
    for W, b in params.layers[:-1]:
        act = np.tanh(act @ W.T + b)
        inputs.append(act)
    W_out, b_out = params.layers[-1]
    logits = act @ W_out.T + b_out
    return ForwardCache(inputs=inputs, logits=logits, probs=softmax(logits))


def forward(params: ModelParams, x: np.ndarray) -> Prediction:
    """Single-sample forward; probs are softmax(logits) on the simplex."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a feature vector, got shape {x.shape}")
    cache = forward_batch(params, x[None, :])
    return Prediction(logits=cache.logits[0], probs=cache.probs[0])


def backward(params: ModelParams, cache: ForwardCache, grad_at_logits: np.ndarray) -> Gradients:
    """Analytic gradients of the scalar batch loss whose logit gradient is given.

    ``grad_at_logits`` must carry any batch normalisation (e.g. the 1/B of a
    mean loss) so the result is the gradient of the final scalar.
    """
    if len(cache.inputs) != len(params.layers):
        raise ShapeError(
            f"cache has {len(cache.inputs)} recorded inputs for {len(params.layers)} layers"
        )
    g = np.asarray(grad_at_logits, dtype=np.float64)
    batch = cache.inputs[0].shape[0]
    if g.shape != (batch, params.arch.num_classes):
        raise ShapeError(
            f"grad_at_logits shape {g.shape} does not match (B={batch}, C={params.arch.num_classes})"
        )
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        layer_in = cache.inputs[k]
        if layer_in.shape[1] != params.layers[k][0].shape[1]:
            raise ShapeError(f"layer {k}: recorded input does not match parameter shape")
        grads[k] = (g.T @ layer_in, g.sum(axis=0))
        if k > 0:
            d_act = g @ params.layers[k][0]
            g = d_act * (1.0 - cache.inputs[k] ** 2)  # tanh'(z) via stored activation
    return Gradients(grads)  # type: ignore[arg-type]


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    """params - lr * grads, elementwise; rejects non-finite gradients."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grads.layers) != len(params.layers):
        raise ShapeError("gradient layer count does not match parameters")
    new_layers = []
    for k, ((W, b), (gW, gb)) in enumerate(zip(params.layers, grads.layers)):
        if gW.shape != W.shape or gb.shape != b.shape:
            raise ShapeError(f"layer {k}: gradient shape mismatch")
        if not (np.isfinite(gW).all() and np.isfinite(gb).all()):
            raise TrainingFault(f"non-finite gradient in layer {k}", layer=k)
        new_layers.append((W - lr * gW, b - lr * gb))
    return ModelParams(params.arch, new_layers)


def ema_update(teacher: ModelParams, student: ModelParams, sigma: float) -> ModelParams:
    """Blend sigma * teacher + (1 - sigma) * student into a new parameter set."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    if teacher.arch != student.arch or len(teacher.layers) != len(student.layers):
        raise ShapeError("teacher and student architectures differ")

    def blend(t: np.ndarray, s: np.ndarray) -> np.ndarray:
        # clamp keeps the result inside [t, s] under rounding (exact fixed
        # point when t == s); correction is at most one ulp
        return np.clip(sigma * t + (1.0 - sigma) * s, np.minimum(t, s), np.maximum(t, s))

    new_layers = []
    for k, ((tW, tb), (sW, sb)) in enumerate(zip(teacher.layers, student.layers)):
        if tW.shape != sW.shape or tb.shape != sb.shape:
            raise ShapeError(f"layer {k}: teacher/student shape mismatch")
        new_layers.append((blend(tW, sW), blend(tb, sb)))
    return ModelParams(teacher.arch, new_layers)


# ---------------------------------------------------------------------------
# serialization


def encode_params(params: ModelParams) -> bytes:
    arch = params.arch
    out = [struct.pack("<I", arch.input_dim)]
    out.append(struct.pack("<I", len(arch.hidden_dims)))
    for d in arch.hidden_dims:
        out.append(struct.pack("<I", d))
    out.append(struct.pack("<I", arch.num_classes))
    for W, b in params.layers:
        out.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def decode_params(buf: bytes, offset: int = 0) -> tuple[ModelParams, int]:
    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise CheckpointError("truncated parameter payload")
        chunk = buf[offset : offset + n]
        offset += n
        return chunk

    input_dim = struct.unpack("<I", take(4))[0]
    n_hidden = struct.unpack("<I", take(4))[0]
    if n_hidden > 1024:
        raise CheckpointError(f"implausible hidden layer count {n_hidden}")
    hidden = tuple(struct.unpack("<I", take(4))[0] for _ in range(n_hidden))
    num_classes = struct.unpack("<I", take(4))[0]
    try:
        arch = Arch(input_dim, hidden, num_classes)
    except ValueError as exc:
        raise CheckpointError(f"corrupt architecture header: {exc}") from exc
    layers = []
    for fan_in, fan_out in arch.layer_dims:
        W = np.frombuffer(take(8 * fan_out * fan_in), dtype="<f8").reshape(fan_out, fan_in).copy()
        b = np.frombuffer(take(8 * fan_out), dtype="<f8").copy()
        layers.append((W, b))
    return ModelParams(arch, layers), offset


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_params(params: ModelParams, path, metadata: dict | None = None) -> None:
    """Write the binary layout above plus a JSON metadata sidecar."""
    path = Path(path)
    path.write_bytes(PARAMS_MAGIC + encode_params(params))
    meta = {
        "format": "ssda-params",
        "schema_version": 1,
        "arch": {
            "input_dim": params.arch.input_dim,
            "hidden_dims": list(params.arch.hidden_dims),
            "num_classes": params.arch.num_classes,
        },
    }
    meta.update(metadata or {})
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_params(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < len(PARAMS_MAGIC) or buf[: len(PARAMS_MAGIC)] != PARAMS_MAGIC:
        raise CheckpointError(f"{path}: not a parameter file (bad magic)")
    params, offset = decode_params(buf, len(PARAMS_MAGIC))
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
    params.validate()
    side = sidecar_path(path)
    metadata = json.loads(side.read_text()) if side.exists() else {}
    return params, metadata
