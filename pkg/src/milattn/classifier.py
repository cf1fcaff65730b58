"""Bag-level classifier heads and the weighted multi-label loss.

Scores are per-class Bernoulli probabilities in [0, 1] (no cross-class
normalization). Two classifiers are provided: an independent logistic
layer and a per-class mixture of experts whose gate softmax includes a
dummy "no expert" slot that floors the score at 0. A context gating layer
sigmoid(W x + b) * x can be applied to the pooled feature before either
classifier. Multi-head score vectors are combined by an elementwise max.

All forward operations have analytic backward counterparts used by the
training loop and verified against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pooling import sigmoid, softmax

LOSS_CLAMP = 1e-7


@dataclass
class ContextGateParams:
    """Square gate W (Dp, Dp) and bias b (Dp,)."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise ValueError(f"context gate needs a square matrix, got {self.w.shape}")
        if self.b.shape != (self.w.shape[0],):
            raise ValueError(f"context gate bias shape {self.b.shape} != ({self.w.shape[0]},)")


@dataclass
class LogisticParams:
    """Per-class logistic layer: W (n, Dp) and bias b (n,)."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError(f"bad logistic shapes w={self.w.shape} b={self.b.shape}")

    @property
    def class_count(self) -> int:
        return self.w.shape[0]


@dataclass
class MoEParams:
    """Per-class mixture of experts.

    experts: (n, E, Dp+1), one affine expert per (class, e) with trailing bias.
    gates:   (n, E+1, Dp+1), affine gate logits; the last gate row is the
             dummy expert contributing probability mass to score 0.
    """

    experts: np.ndarray
    gates: np.ndarray

    def __post_init__(self):
        self.experts = np.asarray(self.experts, dtype=np.float64)
        self.gates = np.asarray(self.gates, dtype=np.float64)
        if self.experts.ndim != 3 or self.gates.ndim != 3:
            raise ValueError("MoE parameters must be 3-d (class, expert, feature+1)")
        n, e, d1 = self.experts.shape
        if e < 1 or self.gates.shape != (n, e + 1, d1):
            raise ValueError(
                f"gate shape {self.gates.shape} inconsistent with experts {self.experts.shape}"
            )

    @property
    def class_count(self) -> int:
        return self.experts.shape[0]

    @property
    def expert_count(self) -> int:
        return self.experts.shape[1]


def _check_vector(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise ValueError(f"{what}: expected shape ({dim},), got {x.shape}")
    return x


def context_gate(x: np.ndarray, p: ContextGateParams) -> np.ndarray:
    """Elementwise multiplicative gate: sigmoid(W x + b) * x."""
    x = _check_vector(x, p.w.shape[1], "context_gate input")
    return sigmoid(p.w @ x + p.b) * x


def context_gate_backward(x: np.ndarray, p: ContextGateParams, upstream: np.ndarray):
    """Returns (d_x, d_w, d_b) for loss gradient `upstream` on the gated output."""
    x = _check_vector(x, p.w.shape[1], "context_gate input")
    upstream = _check_vector(upstream, x.shape[0], "context_gate upstream")
    g = sigmoid(p.w @ x + p.b)
    d_pre = upstream * x * g * (1.0 - g)
    d_x = upstream * g + p.w.T @ d_pre
    return d_x, np.outer(d_pre, x), d_pre


def logistic_classify(x: np.ndarray, p: LogisticParams) -> np.ndarray:
    """Independent per-class scores sigmoid(W_c . x + b_c)."""
    x = _check_vector(x, p.w.shape[1], "logistic input")
    return sigmoid(p.w @ x + p.b)


def logistic_backward(x: np.ndarray, p: LogisticParams, upstream: np.ndarray):
    """Returns (d_x, d_w, d_b) given the loss gradient on the scores."""
    x = _check_vector(x, p.w.shape[1], "logistic input")
    upstream = _check_vector(upstream, p.class_count, "logistic upstream")
    s = sigmoid(p.w @ x + p.b)
    d_z = upstream * s * (1.0 - s)
    return p.w.T @ d_z, np.outer(d_z, x), d_z


def moe_classify(x: np.ndarray, p: MoEParams) -> np.ndarray:
    """Per-class score sum_e gate_e(x) * sigmoid(expert_e(x)).

    Gates are a softmax over E+1 affine logits; the dummy slot's mass
    multiplies a score of 0, so outputs stay in [0, 1].
    """
    x = _check_vector(x, p.experts.shape[2] - 1, "moe input")
    xb = np.append(x, 1.0)
    expert_scores = sigmoid(p.experts @ xb)  # (n, E)
    gate_logits = p.gates @ xb  # (n, E+1)
    gate_logits = gate_logits - gate_logits.max(axis=1, keepdims=True)
    gate_probs = np.exp(gate_logits)
    gate_probs /= gate_probs.sum(axis=1, keepdims=True)
    return (gate_probs[:, :-1] * expert_scores).sum(axis=1)


def moe_backward(x: np.ndarray, p: MoEParams, upstream: np.ndarray):
    """Returns (d_x, d_experts, d_gates) given the loss gradient on the scores."""
    x = _check_vector(x, p.experts.shape[2] - 1, "moe input")
    upstream = _check_vector(upstream, p.class_count, "moe upstream")
    xb = np.append(x, 1.0)
    expert_sig = sigmoid(p.experts @ xb)  # (n, E)
    gate_logits = p.gates @ xb
    gate_logits = gate_logits - gate_logits.max(axis=1, keepdims=True)
    gate_probs = np.exp(gate_logits)
    gate_probs /= gate_probs.sum(axis=1, keepdims=True)  # (n, E+1)
    scores = (gate_probs[:, :-1] * expert_sig).sum(axis=1)

    sig_ext = np.concatenate([expert_sig, np.zeros((p.class_count, 1))], axis=1)
    d_gate_logits = upstream[:, None] * gate_probs * (sig_ext - scores[:, None])
    d_expert_logits = upstream[:, None] * gate_probs[:, :-1] * expert_sig * (1.0 - expert_sig)

    d_experts = d_expert_logits[:, :, None] * xb
    d_gates = d_gate_logits[:, :, None] * xb
    d_x = np.einsum("ce,ced->d", d_expert_logits, p.experts[:, :, :-1]) + np.einsum(
        "cg,cgd->d", d_gate_logits, p.gates[:, :, :-1]
    )
    return d_x, d_experts, d_gates


def combine_heads(per_head: list[np.ndarray]) -> np.ndarray:
    """Elementwise max of per-head class-score vectors."""
    if not per_head:
        raise ValueError("combine_heads needs at least one score vector")
    stacked = np.stack([np.asarray(s, dtype=np.float64) for s in per_head])
    return stacked.max(axis=0)


def combine_heads_backward(per_head: list[np.ndarray], upstream: np.ndarray) -> np.ndarray:
    """Routes the combined-score gradient to the first maximal head per class: (M, n)."""
    stacked = np.stack([np.asarray(s, dtype=np.float64) for s in per_head])
    upstream = np.asarray(upstream, dtype=np.float64)
    winners = stacked.argmax(axis=0)  # (n,)
    d = np.zeros_like(stacked)
    d[winners, np.arange(stacked.shape[1])] = upstream
    return d


def weighted_cross_entropy(pred: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Per-class weighted binary cross entropy, predictions clamped to [1e-7, 1-1e-7].

    sum_c weights_c * (-y_c log p_c - (1 - y_c) log(1 - p_c))
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not pred.shape == labels.shape == weights.shape:
        raise ValueError(
            f"length mismatch: pred {pred.shape}, labels {labels.shape}, weights {weights.shape}"
        )
    p = np.clip(pred, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    terms = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    return float(weights @ terms)


def weighted_cross_entropy_grad(pred: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient of weighted_cross_entropy w.r.t. the raw predictions.

    Zero where the clamp is active, matching the loss exactly.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    p = np.clip(pred, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    grad = weights * ((1.0 - labels) / (1.0 - p) - labels / p)
    inside = (pred > LOSS_CLAMP) & (pred < 1.0 - LOSS_CLAMP)
    return np.where(inside, grad, 0.0)
