"""Pooling operators that reduce a bag of frame features to pooled vectors.

A bag is a ``K x Dp`` float64 matrix ``H`` of per-frame features. Mean and
max pooling collapse it to one vector; attention pooling computes a weight
vector on the probability simplex and returns the weighted average of
frames. Multi-attention runs several independent attention heads and
returns one pooled row per head. The per-frame weight vectors double as a
temporal localization signal.

Every differentiable operator here has a matching analytic backward pass
(`pooling_backward` and the mean/max helpers), checked against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORMALIZATIONS = ("softmax", "sparsemax")


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function, stable for large |z| (never exponentiates a positive)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax with max-subtraction; strictly positive, sums to 1."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("softmax expects a nonempty 1-d vector")
    e = np.exp(z - z.max())
    return e / e.sum()


def sparsemax(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of z onto the probability simplex.

    Sort-and-threshold algorithm: with z sorted descending, find the largest
    k such that 1 + k*z_(k) > sum_{j<=k} z_(j), set
    tau = (sum_{j<=k} z_(j) - 1) / k and return max(z - tau, 0). The support
    is exactly the coordinates with z_i - tau > 0; ties at the threshold
    land on zero.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("sparsemax expects a nonempty 1-d vector")
    zs = np.sort(z)[::-1]
    cumsum = np.cumsum(zs)
    ks = np.arange(1, z.size + 1)
    feasible = 1.0 + ks * zs > cumsum
    k = int(ks[feasible][-1])
    tau = (cumsum[k - 1] - 1.0) / k
    return np.maximum(z - tau, 0.0)


def _normalizer(name: str):
    if name == "softmax":
        return softmax
    if name == "sparsemax":
        return sparsemax
    raise ValueError(f"unknown normalization {name!r}, expected one of {NORMALIZATIONS}")


def softmax_weights_vjp(w: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the logits: J^T g = w*(g - w.g)."""
    return w * (grad_w - float(w @ grad_w))


def sparsemax_weights_vjp(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Pull a gradient on sparsemax outputs back to the logits.

    The Jacobian on the active support S is diag(s) - s s^T / |S|; off the
    support it is zero.
    """
    support = p > 0.0
    size = int(support.sum())
    out = np.zeros_like(p)
    out[support] = grad_p[support] - grad_p[support].sum() / size
    return out


def _weights_vjp(normalization: str, w: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    if normalization == "softmax":
        return softmax_weights_vjp(w, grad_w)
    return sparsemax_weights_vjp(w, grad_w)


@dataclass
class AttentionHead:
    """One attention parameter set: logit e_i = a . tanh(v h_i), optionally gated.

    a is (L,), v and u are (L, Dp). u is the gate matrix; it is ignored by
    ungated heads but kept so every head has the same parameter layout.
    """

    a: np.ndarray
    v: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.a.ndim != 1 or self.v.ndim != 2 or self.u.ndim != 2:
            raise ValueError("attention head expects a: (L,), v: (L, Dp), u: (L, Dp)")
        if self.v.shape != self.u.shape or self.v.shape[0] != self.a.shape[0]:
            raise ValueError(
                f"inconsistent head shapes a={self.a.shape} v={self.v.shape} u={self.u.shape}"
            )

    @property
    def attention_dim(self) -> int:
        return self.a.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.v.shape[1]


@dataclass
class MultiAttention:
    """M attention heads sharing (L, Dp), one normalization, one gating mode."""

    heads: list[AttentionHead]
    normalization: str = "softmax"
    gated: bool = True

    def __post_init__(self):
        if not self.heads:
            raise ValueError("MultiAttention needs at least one head")
        dims = {(h.attention_dim, h.feature_dim) for h in self.heads}
        if len(dims) != 1:
            raise ValueError(f"heads disagree on (L, Dp): {sorted(dims)}")
        _normalizer(self.normalization)

    @property
    def head_count(self) -> int:
        return len(self.heads)

    @property
    def feature_dim(self) -> int:
        return self.heads[0].feature_dim


@dataclass
class HeadGradients:
    a: np.ndarray
    v: np.ndarray
    u: np.ndarray


@dataclass
class PoolGradients:
    """Gradients of a pooled output w.r.t. the frames and each head's parameters."""

    d_frames: np.ndarray
    d_heads: list[HeadGradients] = field(default_factory=list)


def _check_bag(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError(f"expected a nonempty K x Dp frame matrix, got shape {h.shape}")
    return h


def mean_pool(h: np.ndarray) -> np.ndarray:
    """Column-wise mean over frames."""
    return _check_bag(h).mean(axis=0)


def max_pool(h: np.ndarray) -> np.ndarray:
    """Column-wise maximum over frames."""
    return _check_bag(h).max(axis=0)


def mean_pool_backward(frame_count: int, upstream: np.ndarray) -> np.ndarray:
    """Gradient of mean_pool w.r.t. the frames: upstream spread evenly."""
    return np.tile(np.asarray(upstream, dtype=np.float64) / frame_count, (frame_count, 1))


def max_pool_backward(h: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of max_pool: routed to the first maximal frame per column."""
    h = _check_bag(h)
    d = np.zeros_like(h)
    winners = h.argmax(axis=0)
    d[winners, np.arange(h.shape[1])] = upstream
    return d


def _check_head_input(h: np.ndarray, head: AttentionHead) -> np.ndarray:
    h = _check_bag(h)
    if h.shape[1] != head.feature_dim:
        raise ValueError(
            f"frame feature dim {h.shape[1]} does not match head feature dim {head.feature_dim}"
        )
    return h


def _ungated_logits(h: np.ndarray, head: AttentionHead):
    t = np.tanh(h @ head.v.T)  # (K, L)
    return t @ head.a, t


def _gated_logits(h: np.ndarray, head: AttentionHead):
    t = np.tanh(h @ head.v.T)  # (K, L)
    s = sigmoid(h @ head.u.T)  # (K, L)
    return (t * s) @ head.a, t, s


def attention_weights(h: np.ndarray, head: AttentionHead, normalization: str = "softmax") -> np.ndarray:
    """Per-frame weights from logits a . tanh(v h_i), normalized onto the simplex."""
    h = _check_head_input(h, head)
    logits, _ = _ungated_logits(h, head)
    return _normalizer(normalization)(logits)


def gated_attention_weights(h: np.ndarray, head: AttentionHead, normalization: str = "softmax") -> np.ndarray:
    """Per-frame weights from gated logits a . (tanh(v h_i) * sigmoid(u h_i))."""
    h = _check_head_input(h, head)
    logits, _, _ = _gated_logits(h, head)
    return _normalizer(normalization)(logits)


def attention_pool(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted average of frames, sum_i w_i h_i, with w on the simplex."""
    h = _check_bag(h)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (h.shape[0],):
        raise ValueError(f"weight vector shape {w.shape} does not match frame count {h.shape[0]}")
    if abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"weights must sum to 1 within 1e-6, got {w.sum()!r}")
    return w @ h


def multi_attention_weights(h: np.ndarray, ma: MultiAttention) -> np.ndarray:
    """Stacked weight vectors, one row per head: (M, K)."""
    h = _check_bag(h)
    rows = []
    for head in ma.heads:
        if ma.gated:
            rows.append(gated_attention_weights(h, head, ma.normalization))
        else:
            rows.append(attention_weights(h, head, ma.normalization))
    return np.stack(rows)


def multi_attention_pool(h: np.ndarray, ma: MultiAttention) -> np.ndarray:
    """One pooled feature row per head: (M, Dp). Row m is attention_pool with head m's weights."""
    h = _check_bag(h)
    if h.shape[1] != ma.feature_dim:
        raise ValueError(
            f"frame feature dim {h.shape[1]} does not match heads' feature dim {ma.feature_dim}"
        )
    return multi_attention_weights(h, ma) @ h


def pooling_backward(h: np.ndarray, ma: MultiAttention, upstream: np.ndarray) -> PoolGradients:
    """Analytic gradients of multi_attention_pool w.r.t. frames and head parameters.

    `upstream` is the (M, Dp) gradient on the pooled rows. The frame
    gradient combines the direct path (w_i fixed) with the logit path
    through each head's weight normalization.
    """
    h = _check_bag(h)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (ma.head_count, h.shape[1]):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match (M, Dp)=({ma.head_count}, {h.shape[1]})"
        )
    d_frames = np.zeros_like(h)
    d_heads = []
    for head, up in zip(ma.heads, upstream):
        if ma.gated:
            logits, t, s = _gated_logits(h, head)
        else:
            logits, t = _ungated_logits(h, head)
            s = None
        w = _normalizer(ma.normalization)(logits)

        # direct path: pooled = sum_i w_i h_i
        d_frames += np.outer(w, up)

        grad_w = h @ up  # dL/dw_i = up . h_i
        grad_e = _weights_vjp(ma.normalization, w, grad_w)  # (K,)

        if ma.gated:
            q = s * (1.0 - t * t) * head.a  # tanh-path factor, (K, L)
            r = t * s * (1.0 - s) * head.a  # gate-path factor, (K, L)
            d_frames += grad_e[:, None] * (q @ head.v + r @ head.u)
            d_a = (t * s).T @ grad_e
            d_v = (grad_e[:, None] * q).T @ h
            d_u = (grad_e[:, None] * r).T @ h
        else:
            q = (1.0 - t * t) * head.a
            d_frames += grad_e[:, None] * (q @ head.v)
            d_a = t.T @ grad_e
            d_v = (grad_e[:, None] * q).T @ h
            d_u = np.zeros_like(head.u)
        d_heads.append(HeadGradients(a=d_a, v=d_v, u=d_u))
    return PoolGradients(d_frames=d_frames, d_heads=d_heads)
