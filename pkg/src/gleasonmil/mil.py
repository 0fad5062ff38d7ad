"""Bag-level aggregation of instance predictions and the teacher objective.

Two aggregators are provided: slide-level max pooling (the default teacher)
and gated-attention pooling adapted to instance-level multi-class bags. The
bag objective is a multi-label binary cross entropy over the cancerous
classes only; NC is excluded because every slide is assumed to contain
non-cancerous tissue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gleasonmil.grading import SlideLabel
from gleasonmil.model import AttentionParameters, ModelParameters, Prediction, _sigmoid

__all__ = [
    "EPS",
    "BagOutput",
    "AttentionParameters",
    "aggregate_max",
    "aggregate_attention",
    "attention_weights",
    "teacher_bag_loss",
    "teacher_bag_loss_grad",
    "max_aggregation_backward",
    "attention_forward_cache",
    "attention_backward",
    "bag_prob_pixel_gradients",
]

EPS = 1e-7  # probability clamp inside all log terms

_N_CLASSES = 4
_CANCEROUS = slice(1, 4)


@dataclass
class BagOutput:
    """Slide-level class probabilities plus the per-instance evidence."""

    bag_probs: np.ndarray                      # (3,) over (GG3, GG4, GG5)
    per_instance: np.ndarray                   # (N, 4) instance probabilities
    attention_weights: np.ndarray | None = None  # (N, 4) when attention is used


def _as_prob_matrix(instance_preds) -> np.ndarray:
    if isinstance(instance_preds, np.ndarray):
        probs = np.atleast_2d(np.asarray(instance_preds, dtype=np.float64))
    else:
        probs = np.asarray([p.probs if isinstance(p, Prediction) else p
                            for p in instance_preds], dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != _N_CLASSES or probs.shape[0] == 0:
        raise ValueError("empty bag" if probs.size == 0 else
                         f"expected (N, {_N_CLASSES}) instance probabilities")
    return probs


def aggregate_max(instance_preds) -> BagOutput:
    """Bag probability per cancerous class = max over instances."""
    probs = _as_prob_matrix(instance_preds)
    return BagOutput(probs[:, _CANCEROUS].max(axis=0), probs)


def max_aggregation_backward(dbag: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Route bag-probability gradients to each class's argmax instance."""
    dprobs = np.zeros_like(probs)
    winners = probs[:, _CANCEROUS].argmax(axis=0)
    for k in range(3):
        dprobs[winners[k], k + 1] += dbag[k]
    return dprobs


def attention_forward_cache(features: np.ndarray, attn: AttentionParameters,
                            norm: str = "joint"):
    """Gated-attention weights with intermediates kept for backprop.

    Scores are e_{i,k} = w_k^T (tanh(V z_i) * sigm(U z_i)); the softmax
    normalizes over all (i, k) pairs jointly (the written form of the
    aggregation), or per class column when ``norm='per_class'``.
    """
    if norm not in ("joint", "per_class"):
        raise ValueError(f"norm must be 'joint' or 'per_class', got {norm!r}")
    z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if z.shape[0] == 0:
        raise ValueError("empty bag")
    if z.shape[1] != attn.m_dim:
        raise ValueError(f"feature dim {z.shape[1]} does not match attention M={attn.m_dim}")
    t = np.tanh(z @ attn.v.T)                  # (N, L)
    s = _sigmoid(z @ attn.u.T)                 # (N, L)
    gate = t * s
    scores = gate @ attn.w                     # (N, K)
    if norm == "joint":
        flat = scores.ravel()
        e = np.exp(flat - flat.max())
        weights = (e / e.sum()).reshape(scores.shape)
    else:
        e = np.exp(scores - scores.max(axis=0, keepdims=True))
        weights = e / e.sum(axis=0, keepdims=True)
    return weights, (z, t, s, gate, weights, norm)


def attention_weights(features: np.ndarray, attn: AttentionParameters,
                      norm: str = "joint") -> np.ndarray:
    """(N, K) attention weight matrix; see ``attention_forward_cache``."""
    return attention_forward_cache(features, attn, norm)[0]


def aggregate_attention(features, instance_preds, attn: AttentionParameters,
                        norm: str = "joint") -> BagOutput:
    """Attention-weighted sum of instance probabilities per cancerous class."""
    probs = _as_prob_matrix(instance_preds)
    weights, _ = attention_forward_cache(features, attn, norm)
    if weights.shape[0] != probs.shape[0]:
        raise ValueError("features and instance predictions disagree on bag size")
    bag = (weights[:, _CANCEROUS] * probs[:, _CANCEROUS]).sum(axis=0)
    return BagOutput(bag, probs, weights)


def attention_backward(dbag: np.ndarray, probs: np.ndarray, cache,
                       attn: AttentionParameters):
    """Backprop bag gradients through the attention aggregation.

    Returns (dprobs, dfeatures, attention grads dict).
    """
    z, t, s, gate, weights, norm = cache
    dweights = np.zeros_like(weights)
    dprobs = np.zeros_like(probs)
    dweights[:, _CANCEROUS] = dbag * probs[:, _CANCEROUS]
    dprobs[:, _CANCEROUS] = dbag * weights[:, _CANCEROUS]

    if norm == "joint":
        a = weights.ravel()
        da = dweights.ravel()
        dscores = (a * (da - float(da @ a))).reshape(weights.shape)
    else:
        inner = (dweights * weights).sum(axis=0, keepdims=True)
        dscores = weights * (dweights - inner)

    dgate = dscores @ attn.w.T
    dw = gate.T @ dscores
    dt = dgate * s
    ds = dgate * t
    d_zv = dt * (1.0 - t * t)                  # grad wrt z @ V^T
    d_zu = ds * s * (1.0 - s)                  # grad wrt z @ U^T
    dv = d_zv.T @ z
    du = d_zu.T @ z
    dz = d_zv @ attn.v + d_zu @ attn.u
    return dprobs, dz, {"attn_v": dv, "attn_u": du, "attn_w": dw}


def teacher_bag_loss(bag, label: SlideLabel) -> float:
    """Mean binary cross entropy over the three cancerous classes."""
    bag_probs = bag.bag_probs if isinstance(bag, BagOutput) else np.asarray(bag, dtype=np.float64)
    p = np.clip(bag_probs, EPS, 1.0 - EPS)
    y = label.cancerous
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def teacher_bag_loss_grad(bag_probs: np.ndarray, label: SlideLabel) -> np.ndarray:
    """d loss / d bag_probs; zero where the clamp is active."""
    p = np.clip(bag_probs, EPS, 1.0 - EPS)
    y = label.cancerous
    grad = (-y / p + (1.0 - y) / (1.0 - p)) / 3.0
    active = (bag_probs > EPS) & (bag_probs < 1.0 - EPS)
    return np.where(active, grad, 0.0)


def bag_prob_pixel_gradients(pixels: np.ndarray, model: ModelParameters,
                             cancer_class: int) -> tuple[np.ndarray, int, float]:
    """Analytic gradient of the max-aggregated bag probability for one
    cancerous class (1=GG3, 2=GG4, 3=GG5) w.r.t. every instance pixel.

    Returns (gradients shaped like ``pixels`` scaled to the float input
    space, winning instance index, bag probability).
    """
    if cancer_class not in (1, 2, 3):
        raise ValueError("cancer_class must be 1, 2 or 3")
    from gleasonmil.model import network_backward, network_forward, probs_backward

    _, probs, cache = network_forward(pixels, model)
    winner = int(np.argmax(probs[:, cancer_class]))
    dprobs = np.zeros_like(probs)
    dprobs[winner, cancer_class] = 1.0
    dlogits = probs_backward(dprobs, cache, model)
    dx, _ = network_backward(dlogits, None, cache, model)
    return dx, winner, float(probs[winner, cancer_class])
