"""Patch encoder and classifier head with checkpointing.

The desk-scale encoder is a stack of three stride-2 3x3 convolutions with
ReLU, closed by global-average pooling; a dense softmax layer maps the
pooled features to the four grade classes. Everything is float64 numpy with
explicit forward/backward passes, so training is deterministic and
gradients are finite-difference checkable.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "CHECKPOINT_VERSION",
    "EncoderConfig",
    "AttentionParameters",
    "ModelParameters",
    "Prediction",
    "CheckpointError",
    "init_parameters",
    "encode",
    "encode_batch",
    "classify",
    "classify_batch",
    "network_forward",
    "network_backward",
    "softmax",
    "softmax_backward",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
N_CLASSES = 4

_KERNEL = 3
_STRIDE = 2
_PAD = 1


class CheckpointError(IOError):
    """A checkpoint file cannot be loaded as written."""


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the patch encoder.

    ``head`` selects the classifier output nonlinearity; "softmax" is the
    default, "sigmoid" is the per-class variant used to probe the teacher
    objective.
    """

    input_side: int = 32
    feature_dim: int = 64
    arch: str = "conv3"
    head: str = "softmax"

    def __post_init__(self) -> None:
        if self.input_side < 8:
            raise ValueError("input_side must be >= 8")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.arch != "conv3":
            raise ValueError(f"unknown architecture tag {self.arch!r}")
        if self.head not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def channels(self) -> tuple[int, int, int]:
        m = self.feature_dim
        return (max(m // 8, 2), max(m // 4, 4), m)


@dataclass
class AttentionParameters:
    """Gated-attention projection weights for bag aggregation.

    ``v`` and ``u`` project features (M) to the attention space (L); ``w``
    holds one scoring vector per class (L x K).
    """

    v: np.ndarray
    u: np.ndarray
    w: np.ndarray

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.v.shape != self.u.shape or self.v.ndim != 2:
            raise ValueError("v and u must be equal-shape L x M matrices")
        if self.w.ndim != 2 or self.w.shape[0] != self.v.shape[0]:
            raise ValueError("w must be L x K with L matching v/u")
        for a in (self.v, self.u, self.w):
            if not np.isfinite(a).all():
                raise ValueError("attention parameters must be finite")

    @property
    def l_dim(self) -> int:
        return self.v.shape[0]

    @property
    def m_dim(self) -> int:
        return self.v.shape[1]


@dataclass
class ModelParameters:
    """All trainable weights of one model, keyed by name.

    Keys: conv{0,1,2}_w/_b, head_w, head_b, and optionally attn_v/attn_u/
    attn_w when the model carries an attention block.
    """

    config: EncoderConfig
    params: dict[str, np.ndarray]
    seed: int
    version: int = CHECKPOINT_VERSION

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def attention(self) -> AttentionParameters | None:
        if "attn_v" not in self.params:
            return None
        return AttentionParameters(self.params["attn_v"], self.params["attn_u"],
                                   self.params["attn_w"])

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.params.items()},
                               self.seed, self.version)

    def check_finite(self) -> None:
        for name, value in self.params.items():
            if not np.isfinite(value).all():
                raise ValueError(f"non-finite values in parameter {name}")


@dataclass(frozen=True)
class Prediction:
    """Per-patch class probabilities over (NC, GG3, GG4, GG5)."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (N_CLASSES,):
            raise ValueError(f"expected a {N_CLASSES}-vector of probabilities")
        if not np.isfinite(probs).all() or probs.min() < 0:
            raise ValueError("probabilities must be finite and nonnegative")
        object.__setattr__(self, "probs", probs)

    @property
    def hard(self) -> int:
        """Argmax class index (ties resolve to the lowest index)."""
        return int(np.argmax(self.probs))


def init_parameters(config: EncoderConfig, seed: int,
                    attention_dim: int | None = None) -> ModelParameters:
    """Seeded uniform initialization: weights from
    U(-sqrt(6/fan_in), +sqrt(6/fan_in)) (unit signal gain through ReLU),
    biases from a smaller U(-1/sqrt(fan_in), +1/sqrt(fan_in)). Nonzero
    biases keep ReLU pre-activations away from exact zeros, so
    finite-difference gradient checks stay valid at the initial point.
    ``attention_dim`` adds a gated-attention block of that width."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in, gain=np.sqrt(6.0)):
        bound = gain / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    channels = config.channels
    params: dict[str, np.ndarray] = {}
    c_in = 3
    for i, c_out in enumerate(channels):
        fan_in = _KERNEL * _KERNEL * c_in
        params[f"conv{i}_w"] = uniform((_KERNEL, _KERNEL, c_in, c_out), fan_in)
        params[f"conv{i}_b"] = uniform((c_out,), fan_in, gain=1.0)
        c_in = c_out
    params["head_w"] = uniform((config.feature_dim, N_CLASSES), config.feature_dim)
    params["head_b"] = uniform((N_CLASSES,), config.feature_dim, gain=1.0)
    if attention_dim is not None:
        if attention_dim < 1:
            raise ValueError("attention_dim must be >= 1")
        m = config.feature_dim
        params["attn_v"] = uniform((attention_dim, m), m)
        params["attn_u"] = uniform((attention_dim, m), m)
        params["attn_w"] = uniform((attention_dim, N_CLASSES), attention_dim)
    return ModelParameters(config, params, seed)


# ---------------------------------------------------------------------------
# layer primitives (NHWC, float64)

def _conv_forward(x, w, b):
    n, h, width, _ = x.shape
    xp = np.pad(x, ((0, 0), (_PAD, _PAD), (_PAD, _PAD), (0, 0)))
    windows = sliding_window_view(xp, (_KERNEL, _KERNEL), axis=(1, 2))
    windows = windows[:, ::_STRIDE, ::_STRIDE]           # (N, oh, ow, C, k, k)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))
    oh, ow = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(n * oh * ow, -1)
    w2 = w.reshape(-1, w.shape[3])
    out = (cols2 @ w2).reshape(n, oh, ow, w.shape[3]) + b
    return out, (cols2, x.shape, w)


def _conv_backward(dout, cache):
    cols2, x_shape, w = cache
    n, h, width, c_in = x_shape
    oh, ow, c_out = dout.shape[1], dout.shape[2], dout.shape[3]
    dout2 = dout.reshape(n * oh * ow, c_out)
    dw = (cols2.T @ dout2).reshape(w.shape)
    db = dout2.sum(axis=0)
    dcols = (dout2 @ w.reshape(-1, c_out).T).reshape(n, oh, ow, _KERNEL, _KERNEL, c_in)
    dxp = np.zeros((n, h + 2 * _PAD, width + 2 * _PAD, c_in))
    for ki in range(_KERNEL):
        for kj in range(_KERNEL):
            dxp[:, ki:ki + _STRIDE * oh:_STRIDE,
                kj:kj + _STRIDE * ow:_STRIDE] += dcols[:, :, :, ki, kj]
    dx = dxp[:, _PAD:_PAD + h, _PAD:_PAD + width]
    return dx, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dprobs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# network forward / backward

def _as_float_batch(pixels: np.ndarray) -> np.ndarray:
    x = np.asarray(pixels)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != 3:
        raise ValueError("expected (N, side, side, 3) pixels")
    if x.dtype == np.uint8:
        x = x.astype(np.float64) / 255.0 - 0.5
    else:
        x = x.astype(np.float64, copy=False)
    return x


def network_forward(pixels: np.ndarray, model: ModelParameters):
    """Full forward pass: returns (features Z, class scores, cache).

    uint8 pixels are scaled and centered to [-0.5, 0.5]; float inputs are
    used as given.
    """
    x = _as_float_batch(pixels)
    side = model.config.input_side
    if x.shape[1] != side or x.shape[2] != side:
        raise ValueError(f"patch side {x.shape[1]}x{x.shape[2]} does not match "
                         f"encoder input_side {side}")
    caches = []
    for i in range(3):
        x, conv_cache = _conv_forward(x, model.params[f"conv{i}_w"], model.params[f"conv{i}_b"])
        relu_mask = x > 0
        x = x * relu_mask
        caches.append((conv_cache, relu_mask))
    pooled_shape = x.shape
    z = x.mean(axis=(1, 2))                              # global average pool
    logits = z @ model.params["head_w"] + model.params["head_b"]
    if model.config.head == "softmax":
        probs = softmax(logits)
    else:
        probs = _sigmoid(logits)
    cache = (caches, pooled_shape, z, probs)
    return z, probs, cache


def network_backward(dlogits: np.ndarray, dz_extra: np.ndarray | None, cache,
                     model: ModelParameters):
    """Backward pass from logit gradients (plus optional direct feature
    gradients, used by attention aggregation). Returns (dpixels, grads)."""
    caches, pooled_shape, z, _ = cache
    grads = {
        "head_w": z.T @ dlogits,
        "head_b": dlogits.sum(axis=0),
    }
    dz = dlogits @ model.params["head_w"].T
    if dz_extra is not None:
        dz = dz + dz_extra
    n, ph, pw, c = pooled_shape
    dx = np.broadcast_to(dz[:, None, None, :] / (ph * pw), pooled_shape).copy()
    for i in reversed(range(3)):
        conv_cache, relu_mask = caches[i]
        dx = dx * relu_mask
        dx, dw, db = _conv_backward(dx, conv_cache)
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return dx, grads


def probs_backward(dprobs: np.ndarray, cache, model: ModelParameters):
    """Map probability-space gradients to logit-space for the active head."""
    probs = cache[3]
    if model.config.head == "softmax":
        return softmax_backward(dprobs, probs)
    return dprobs * probs * (1.0 - probs)


# ---------------------------------------------------------------------------
# public inference API

def encode_batch(pixels: np.ndarray, model: ModelParameters) -> np.ndarray:
    """Feature vectors (N, M) for a batch of patches."""
    z, _, _ = network_forward(pixels, model)
    return z


def encode(pixels: np.ndarray, model: ModelParameters) -> np.ndarray:
    """Feature vector (M,) for a single patch."""
    return encode_batch(pixels[None] if pixels.ndim == 3 else pixels, model)[0]


def classify_batch(z: np.ndarray, model: ModelParameters) -> np.ndarray:
    """Class probabilities (N, 4) from feature vectors."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.feature_dim:
        raise ValueError(f"feature length {z.shape[1]} does not match M={model.feature_dim}")
    if not np.isfinite(z).all():
        raise ValueError("non-finite feature input")
    logits = z @ model.params["head_w"] + model.params["head_b"]
    return softmax(logits) if model.config.head == "softmax" else _sigmoid(logits)


def classify(z: np.ndarray, model: ModelParameters) -> Prediction:
    """Prediction for a single feature vector."""
    return Prediction(classify_batch(np.asarray(z)[None], model)[0])


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(model: ModelParameters, path: str | Path) -> None:
    """Write a versioned npz checkpoint embedding the encoder config."""
    model.check_finite()
    meta = {
        "version": model.version,
        "seed": model.seed,
        "config": {
            "input_side": model.config.input_side,
            "feature_dim": model.config.feature_dim,
            "arch": model.config.arch,
            "head": model.config.head,
        },
        "param_names": sorted(model.params),
    }
    arrays = {f"param_{k}": v for k, v in model.params.items()}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> ModelParameters:
    """Load a checkpoint, failing loudly on corruption or version mismatch."""
    path = Path(path)
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            arrays = {name: data[f"param_{name}"] for name in meta["param_names"]}
    except (OSError, KeyError, ValueError, EOFError, zipfile.BadZipFile,
            json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    found = meta.get("version")
    if found != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch in {path}: expected {CHECKPOINT_VERSION}, found {found}")
    config = EncoderConfig(**meta["config"])
    return ModelParameters(config, {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()},
                           seed=meta["seed"], version=found)
