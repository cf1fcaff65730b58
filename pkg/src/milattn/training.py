"""End-to-end model, Adam optimizer, two-phase training, gradient checking.

The model scores a bag in four stages: an affine+ReLU frame projection,
pooling (mean, max, or one of the attention variants), a context gate on
each pooled row, and a shared classifier applied per row whose score
vectors are combined by an elementwise max. Training is plain
minibatch Adam on the weighted per-class cross entropy, phase 1 over
whole bags with frame sampling, phase 2 over 5-frame labeled segments.

Everything is deterministic given (initial model, corpus, config, seed):
batches, frame samples and parameter updates all derive from the seed,
and reductions run in a fixed order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import classifier as clf
from . import pooling
from .datamodel import Bag, SamplingScheme, Vocabulary, sample_frames
from .ioutil import atomic_write_text

POOLING_KINDS = ("mean", "max", "attention", "gated_attention", "multi_attention")
ATTENTION_KINDS = ("attention", "gated_attention", "multi_attention")
CLASSIFIER_KINDS = ("logistic", "moe")


class NonFiniteLossError(RuntimeError):
    """Training hit a NaN/inf loss; carries the offending step for diagnosis."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


@dataclass
class ModelParams:
    """All trainable parameters plus the pooling kind that wires them together."""

    projection_w: np.ndarray  # (D, Dp)
    projection_b: np.ndarray  # (Dp,)
    multi_attention: pooling.MultiAttention | None
    context_gate: clf.ContextGateParams
    classifier: clf.LogisticParams | clf.MoEParams
    pooling_kind: str

    def __post_init__(self):
        if self.pooling_kind not in POOLING_KINDS:
            raise ValueError(f"unknown pooling kind {self.pooling_kind!r}")
        if self.pooling_kind in ATTENTION_KINDS and self.multi_attention is None:
            raise ValueError(f"pooling kind {self.pooling_kind!r} needs attention heads")

    @property
    def feature_dim(self) -> int:
        return self.projection_w.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.projection_w.shape[1]

    @property
    def class_count(self) -> int:
        return self.classifier.class_count

    @property
    def classifier_kind(self) -> str:
        return "moe" if isinstance(self.classifier, clf.MoEParams) else "logistic"

    def param_groups(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter arrays in a fixed order (init, Adam and checkpoints rely on it)."""
        groups = [("projection.w", self.projection_w), ("projection.b", self.projection_b)]
        if self.multi_attention is not None:
            for i, head in enumerate(self.multi_attention.heads):
                groups += [
                    (f"attention.{i}.a", head.a),
                    (f"attention.{i}.v", head.v),
                    (f"attention.{i}.u", head.u),
                ]
        groups += [("context_gate.w", self.context_gate.w), ("context_gate.b", self.context_gate.b)]
        if isinstance(self.classifier, clf.MoEParams):
            groups += [("classifier.experts", self.classifier.experts), ("classifier.gates", self.classifier.gates)]
        else:
            groups += [("classifier.w", self.classifier.w), ("classifier.b", self.classifier.b)]
        return groups

    def copy(self) -> "ModelParams":
        ma = self.multi_attention
        return ModelParams(
            projection_w=self.projection_w.copy(),
            projection_b=self.projection_b.copy(),
            multi_attention=None
            if ma is None
            else pooling.MultiAttention(
                heads=[pooling.AttentionHead(h.a.copy(), h.v.copy(), h.u.copy()) for h in ma.heads],
                normalization=ma.normalization,
                gated=ma.gated,
            ),
            context_gate=clf.ContextGateParams(self.context_gate.w.copy(), self.context_gate.b.copy()),
            classifier=(
                clf.MoEParams(self.classifier.experts.copy(), self.classifier.gates.copy())
                if isinstance(self.classifier, clf.MoEParams)
                else clf.LogisticParams(self.classifier.w.copy(), self.classifier.b.copy())
            ),
            pooling_kind=self.pooling_kind,
        )


def init_model(
    feature_dim: int,
    hidden_dim: int,
    class_count: int,
    pooling_kind: str,
    attention_dim: int = 8,
    heads: int | None = None,
    normalization: str = "softmax",
    classifier_kind: str = "logistic",
    experts: int = 2,
    rng_seed: int = 0,
) -> ModelParams:
    """Fresh model; matrices are Glorot-uniform from the seed, biases zero.

    `heads` defaults to 1 for single-head kinds and 4 for multi_attention;
    the 'attention' kind is ungated, the other attention kinds are gated.
    """
    if pooling_kind not in POOLING_KINDS:
        raise ValueError(f"unknown pooling kind {pooling_kind!r}")
    if classifier_kind not in CLASSIFIER_KINDS:
        raise ValueError(f"unknown classifier kind {classifier_kind!r}")
    rng = np.random.default_rng(rng_seed)

    def glorot(*shape):
        fan_in, fan_out = (shape[-1], shape[-2]) if len(shape) > 1 else (shape[0], 1)
        r = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-r, r, size=shape)

    projection_w = glorot(feature_dim, hidden_dim)  # (D, Dp)
    projection_b = np.zeros(hidden_dim)

    multi_attention = None
    if pooling_kind in ATTENTION_KINDS:
        if heads is None:
            heads = 4 if pooling_kind == "multi_attention" else 1
        # The score vector a starts at zero so fresh attention weights are
        # uniform and the model begins as mean pooling; a random a makes
        # the untrained model pool a random frame subset, which can fail
        # to bootstrap at small scale.
        head_list = [
            pooling.AttentionHead(
                a=np.zeros(attention_dim),
                v=glorot(attention_dim, hidden_dim),
                u=glorot(attention_dim, hidden_dim),
            )
            for _ in range(heads)
        ]
        multi_attention = pooling.MultiAttention(
            heads=head_list, normalization=normalization, gated=(pooling_kind != "attention")
        )

    context_gate = clf.ContextGateParams(w=glorot(hidden_dim, hidden_dim), b=np.zeros(hidden_dim))
    if classifier_kind == "moe":
        model_classifier = clf.MoEParams(
            experts=glorot(class_count, experts, hidden_dim + 1),
            gates=glorot(class_count, experts + 1, hidden_dim + 1),
        )
    else:
        model_classifier = clf.LogisticParams(w=glorot(class_count, hidden_dim), b=np.zeros(class_count))
    return ModelParams(
        projection_w=projection_w,
        projection_b=projection_b,
        multi_attention=multi_attention,
        context_gate=context_gate,
        classifier=model_classifier,
        pooling_kind=pooling_kind,
    )


@dataclass
class _ForwardCache:
    frames: np.ndarray
    pre_activation: np.ndarray  # (K, Dp), before ReLU
    hidden: np.ndarray  # (K, Dp)
    pooled: np.ndarray  # (M, Dp)
    per_head_scores: np.ndarray  # (M, n)
    weights: list[np.ndarray]  # per-head frame weights; empty for max pooling


def _project(model: ModelParams, frames: np.ndarray):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"expected a nonempty K x D frame matrix, got {frames.shape}")
    if frames.shape[1] != model.feature_dim:
        raise ValueError(f"frame dim {frames.shape[1]} does not match model dim {model.feature_dim}")
    pre = frames @ model.projection_w + model.projection_b
    return frames, pre, np.maximum(pre, 0.0)


def _forward_cache(model: ModelParams, frames: np.ndarray) -> _ForwardCache:
    frames, pre, hidden = _project(model, frames)
    k = hidden.shape[0]
    if model.pooling_kind == "mean":
        pooled = pooling.mean_pool(hidden)[None, :]
        weights = [np.full(k, 1.0 / k)]
    elif model.pooling_kind == "max":
        pooled = pooling.max_pool(hidden)[None, :]
        weights = []
    else:
        w = pooling.multi_attention_weights(hidden, model.multi_attention)
        pooled = w @ hidden
        weights = list(w)
    scores = []
    for row in pooled:
        gated = clf.context_gate(row, model.context_gate)
        if isinstance(model.classifier, clf.MoEParams):
            scores.append(clf.moe_classify(gated, model.classifier))
        else:
            scores.append(clf.logistic_classify(gated, model.classifier))
    return _ForwardCache(
        frames=frames,
        pre_activation=pre,
        hidden=hidden,
        pooled=pooled,
        per_head_scores=np.stack(scores),
        weights=weights,
    )


def forward(model: ModelParams, frames: np.ndarray):
    """Class scores for a bag plus per-head frame-weight diagnostics.

    Returns (scores, weights) where scores is the elementwise max of the
    per-head classifier outputs and weights lists one simplex vector per
    attention head (a single uniform vector for mean pooling, nothing for
    max pooling).
    """
    cache = _forward_cache(model, frames)
    return cache.per_head_scores.max(axis=0), cache.weights


def zero_gradients(model: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.param_groups()}


def backward(model: ModelParams, cache: _ForwardCache, d_scores: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of (d_scores . scores) w.r.t. every parameter group."""
    grads = zero_gradients(model)
    d_per_head = clf.combine_heads_backward(list(cache.per_head_scores), d_scores)
    d_pooled = np.zeros_like(cache.pooled)
    for m, row in enumerate(cache.pooled):
        gated = clf.context_gate(row, model.context_gate)
        if isinstance(model.classifier, clf.MoEParams):
            d_gated, d_experts, d_gates = clf.moe_backward(gated, model.classifier, d_per_head[m])
            grads["classifier.experts"] += d_experts
            grads["classifier.gates"] += d_gates
        else:
            d_gated, d_w, d_b = clf.logistic_backward(gated, model.classifier, d_per_head[m])
            grads["classifier.w"] += d_w
            grads["classifier.b"] += d_b
        d_row, d_cg_w, d_cg_b = clf.context_gate_backward(row, model.context_gate, d_gated)
        grads["context_gate.w"] += d_cg_w
        grads["context_gate.b"] += d_cg_b
        d_pooled[m] = d_row

    if model.pooling_kind == "mean":
        d_hidden = pooling.mean_pool_backward(cache.hidden.shape[0], d_pooled[0])
    elif model.pooling_kind == "max":
        d_hidden = pooling.max_pool_backward(cache.hidden, d_pooled[0])
    else:
        pg = pooling.pooling_backward(cache.hidden, model.multi_attention, d_pooled)
        d_hidden = pg.d_frames
        for i, hg in enumerate(pg.d_heads):
            grads[f"attention.{i}.a"] += hg.a
            grads[f"attention.{i}.v"] += hg.v
            grads[f"attention.{i}.u"] += hg.u

    d_pre = d_hidden * (cache.pre_activation > 0.0)
    grads["projection.w"] += cache.frames.T @ d_pre
    grads["projection.b"] += d_pre.sum(axis=0)
    return grads


def loss_and_gradients(model: ModelParams, frames: np.ndarray, labels: np.ndarray, class_weights: np.ndarray):
    """(weighted CE loss, parameter gradients, scores) for one bag."""
    cache = _forward_cache(model, frames)
    scores = cache.per_head_scores.max(axis=0)
    loss = clf.weighted_cross_entropy(scores, labels, class_weights)
    d_scores = clf.weighted_cross_entropy_grad(scores, labels, class_weights)
    return loss, backward(model, cache, d_scores), scores


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second-moment accumulators per parameter group plus hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(model: ModelParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, arr in model.param_groups():
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adam_step(model: ModelParams, grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place; returns (model, state)."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, arr in model.param_groups():
        g = grads[name]
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


# ---------------------------------------------------------------------------
# two-phase training


@dataclass
class TrainConfig:
    """Desk-scale defaults; raise steps/batch for paper-scale runs.

    Fine-tuning runs at `phase2_lr` (defaulting to lr/10): the segment set
    is small and a hot learning rate makes phase 2 overfit it quickly.
    """

    batch_size: int = 32
    phase1_steps: int = 500
    phase2_steps: int = 100
    sampling: SamplingScheme = field(default_factory=lambda: SamplingScheme("random_with_replacement", 30))
    lr: float = 1e-3
    phase2_lr: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValueError("batch_size must be >= 1 and step counts >= 0")
        if self.lr <= 0 or (self.phase2_lr is not None and self.phase2_lr <= 0):
            raise ValueError("learning rates must be positive")

    @property
    def effective_phase2_lr(self) -> float:
        return self.lr / 10.0 if self.phase2_lr is None else self.phase2_lr


def _train_loop(model, bags, vocab, config, steps, phase, sample):
    if not bags:
        raise ValueError("training corpus is empty")
    weights = vocab.class_weights
    state = init_adam(model, lr=config.lr if phase == 1 else config.effective_phase2_lr)
    trace: list[float] = []
    for step in range(steps):
        rng = np.random.default_rng([config.rng_seed, phase, step])
        batch = rng.integers(0, len(bags), size=config.batch_size)
        grad_sum = zero_gradients(model)
        loss_sum = 0.0
        for j, bag_index in enumerate(batch):
            bag = bags[bag_index]
            if sample and config.sampling is not None:
                idx = sample_frames(bag, config.sampling, seed=[config.rng_seed, phase, step, j])
                frames = bag.frames[idx]
            else:
                frames = bag.frames
            loss, grads, _ = loss_and_gradients(model, frames, bag.labels, weights)
            loss_sum += loss
            for name in grad_sum:
                grad_sum[name] += grads[name]
        mean_loss = loss_sum / config.batch_size
        if not np.isfinite(mean_loss):
            raise NonFiniteLossError(step, mean_loss)
        for name in grad_sum:
            grad_sum[name] /= config.batch_size
        adam_step(model, grad_sum, state)
        trace.append(float(mean_loss))
    return model, trace


def train_phase1(model: ModelParams, train_bags: list[Bag], vocab: Vocabulary, config: TrainConfig):
    """Bag-level training on noisy whole-video labels with frame sampling."""
    return _train_loop(model, train_bags, vocab, config, config.phase1_steps, phase=1, sample=True)


def finetune_phase2(model: ModelParams, labeled_segments, vocab: Vocabulary, config: TrainConfig):
    """Segment-level fine-tuning: 5-frame bags, no frame sampling, fewer steps."""
    return _train_loop(model, labeled_segments, vocab, config, config.phase2_steps, phase=2, sample=False)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    groups: dict[str, float]
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_param": self.worst_param,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "groups": self.groups,
        }


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a - b| / max(1, |a|, |b|): relative for large values, absolute near zero
    where finite-difference roundoff dominates any true relative measure."""
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def gradient_check(
    model: ModelParams,
    bag,
    labels: np.ndarray,
    vocab: Vocabulary,
    tolerance: float = 1e-4,
    fd_step: float = 1e-5,
) -> GradCheckReport:
    """Compare the full backward pass against central finite differences.

    Every parameter coordinate is perturbed by +/- fd_step with the loss
    recomputed from scratch, so the check is independent of the analytic
    path. Intended for tiny models; cost is two forward passes per
    parameter.
    """
    frames = bag.frames if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)
    weights = vocab.class_weights if isinstance(vocab, Vocabulary) else np.asarray(vocab, dtype=np.float64)
    _, analytic, _ = loss_and_gradients(model, frames, labels, weights)

    def loss_now() -> float:
        cache = _forward_cache(model, frames)
        return clf.weighted_cross_entropy(cache.per_head_scores.max(axis=0), labels, weights)

    groups: dict[str, float] = {}
    worst_param, worst = "", 0.0
    for name, arr in model.param_groups():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + fd_step
            up = loss_now()
            flat[i] = original - fd_step
            down = loss_now()
            flat[i] = original
            num_flat[i] = (up - down) / (2.0 * fd_step)
        err = relative_error(analytic[name], numeric)
        group_max = float(err.max()) if err.size else 0.0
        groups[name] = group_max
        if group_max >= worst:
            if group_max > worst or not worst_param:
                worst_param, worst = name, group_max
    return GradCheckReport(
        max_rel_error=worst,
        worst_param=worst_param,
        groups=groups,
        tolerance=tolerance,
        passed=worst < tolerance,
    )


# ---------------------------------------------------------------------------
# checkpoints


def _model_meta(model: ModelParams) -> dict:
    ma = model.multi_attention
    return {
        "pooling_kind": model.pooling_kind,
        "classifier_kind": model.classifier_kind,
        "normalization": None if ma is None else ma.normalization,
        "gated": None if ma is None else ma.gated,
        "dims": {
            "feature_dim": model.feature_dim,
            "hidden_dim": model.hidden_dim,
            "class_count": model.class_count,
            "attention_dim": None if ma is None else ma.heads[0].attention_dim,
            "heads": None if ma is None else ma.head_count,
            "experts": model.classifier.expert_count if model.classifier_kind == "moe" else None,
        },
    }


def save_checkpoint(path: str, model: ModelParams, adam_state: AdamState | None = None) -> None:
    """Single JSON document with every tensor; floats round-trip bit-exactly."""
    doc = _model_meta(model)
    doc["params"] = {name: arr.tolist() for name, arr in model.param_groups()}
    if adam_state is None:
        doc["adam"] = None
    else:
        doc["adam"] = {
            "lr": adam_state.lr,
            "beta1": adam_state.beta1,
            "beta2": adam_state.beta2,
            "eps": adam_state.eps,
            "t": adam_state.t,
            "m": {k: v.tolist() for k, v in adam_state.m.items()},
            "v": {k: v.tolist() for k, v in adam_state.v.items()},
        }
    atomic_write_text(path, json.dumps(doc) + "\n")


def load_checkpoint(path: str):
    """Rebuild (model, adam_state_or_None) from a checkpoint file."""
    with open(path) as fh:
        doc = json.load(fh)
    params = {name: np.asarray(value, dtype=np.float64) for name, value in doc["params"].items()}
    dims = doc["dims"]

    multi_attention = None
    if doc["pooling_kind"] in ATTENTION_KINDS:
        heads = [
            pooling.AttentionHead(
                a=params[f"attention.{i}.a"], v=params[f"attention.{i}.v"], u=params[f"attention.{i}.u"]
            )
            for i in range(dims["heads"])
        ]
        multi_attention = pooling.MultiAttention(
            heads=heads, normalization=doc["normalization"], gated=doc["gated"]
        )
    if doc["classifier_kind"] == "moe":
        model_classifier = clf.MoEParams(experts=params["classifier.experts"], gates=params["classifier.gates"])
    else:
        model_classifier = clf.LogisticParams(w=params["classifier.w"], b=params["classifier.b"])
    model = ModelParams(
        projection_w=params["projection.w"],
        projection_b=params["projection.b"],
        multi_attention=multi_attention,
        context_gate=clf.ContextGateParams(w=params["context_gate.w"], b=params["context_gate.b"]),
        classifier=model_classifier,
        pooling_kind=doc["pooling_kind"],
    )
    adam = None
    if doc.get("adam") is not None:
        raw = doc["adam"]
        adam = AdamState(
            lr=raw["lr"],
            beta1=raw["beta1"],
            beta2=raw["beta2"],
            eps=raw["eps"],
            t=raw["t"],
            m={k: np.asarray(v, dtype=np.float64) for k, v in raw["m"].items()},
            v={k: np.asarray(v, dtype=np.float64) for k, v in raw["v"].items()},
        )
    return model, adam
