"""Segment ranking metric (mean average precision at a rank cutoff),
prediction sets, score ensembling and submission files.

Per class, predictions are ranked by descending score (ties broken by
ascending segment id), truncated to the top K_s, and scored as
AP_c = sum_k P(k) * rel(k) / N_c where N_c counts that class's positive
segments. The reported metric is the mean of AP_c over the localizable
classes that have at least one positive; classes with no positives are
excluded rather than scored 0/0.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datamodel import Segment, Vocabulary
from .ioutil import atomic_write_text
from .training import ModelParams, forward

DEFAULT_RANK_CUTOFF = 100_000


@dataclass
class PredictionSet:
    """(segment_id, class_id, score) triples with unique (segment, class) keys."""

    entries: list[tuple[str, int, float]]

    def __post_init__(self):
        seen = set()
        for segment_id, class_id, score in self.entries:
            key = (segment_id, class_id)
            if key in seen:
                raise ValueError(f"duplicate prediction for segment {segment_id!r} class {class_id}")
            seen.add(key)
            if not np.isfinite(score):
                raise ValueError(f"non-finite score for segment {segment_id!r} class {class_id}")
        self._keys = seen

    @property
    def key_set(self) -> set[tuple[str, int]]:
        return self._keys

    def as_dict(self) -> dict[tuple[str, int], float]:
        return {(s, c): x for s, c, x in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, PredictionSet) and sorted(self.entries) == sorted(other.entries)


@dataclass
class GroundTruth:
    """Positive (segment_id, class_id) pairs plus per-class positive counts."""

    positives: set[tuple[str, int]]
    counts: dict[int, int] = field(init=False)

    def __post_init__(self):
        counts: dict[int, int] = {}
        for _, class_id in self.positives:
            counts[class_id] = counts.get(class_id, 0) + 1
        self.counts = counts

    @classmethod
    def from_segments(cls, segments: list[Segment], vocab: Vocabulary) -> "GroundTruth":
        """Positives over the localizable classes of labeled segments."""
        positives = set()
        for seg in segments:
            for class_id in np.flatnonzero(seg.labels):
                if vocab.localizable_mask[class_id]:
                    positives.add((seg.key, int(class_id)))
        return cls(positives=positives)


@dataclass
class MetricConfig:
    rank_cutoff: int = DEFAULT_RANK_CUTOFF

    def __post_init__(self):
        if self.rank_cutoff < 1:
            raise ValueError("rank cutoff must be >= 1")


def average_precision_at_k(ranked_rel, positive_count: int, rank_cutoff: int = DEFAULT_RANK_CUTOFF) -> float:
    """AP over a relevance list already ranked by descending score.

    P(k) is the fraction of relevant items in the top k; the sum of
    P(k) * rel(k) over the first rank_cutoff items is divided by the
    class's total positive count (not just the retrieved ones).
    """
    if positive_count < 1:
        raise ValueError("average precision needs at least one positive (N_c >= 1)")
    rel = np.asarray(ranked_rel, dtype=bool)[:rank_cutoff]
    if rel.size == 0:
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float(precision[rel].sum() / positive_count)


def map_at_k(pred: PredictionSet, gt: GroundTruth, cfg: MetricConfig | None = None):
    """(MAP, per-class rows) over the ground truth's classes with positives.

    Per class, predictions sort by descending score with ties broken by
    ascending segment id; a class with no predictions contributes 0.
    """
    cfg = cfg or MetricConfig()
    by_class: dict[int, list[tuple[str, float]]] = {}
    for segment_id, class_id, score in pred.entries:
        by_class.setdefault(class_id, []).append((segment_id, score))

    per_class = []
    for class_id in sorted(gt.counts):
        n_c = gt.counts[class_id]
        rows = by_class.get(class_id, [])
        rows.sort(key=lambda r: (-r[1], r[0]))
        ranked_rel = [(segment_id, class_id) in gt.positives for segment_id, _ in rows]
        ap = average_precision_at_k(ranked_rel, n_c, cfg.rank_cutoff)
        per_class.append({"class_id": class_id, "ap": ap, "n_c": n_c})
    if not per_class:
        raise ValueError("ground truth has no class with positives")
    mean_ap = float(np.mean([row["ap"] for row in per_class]))
    return mean_ap, per_class


def predict_segments(model: ModelParams, segments: list[Segment], vocab: Vocabulary, workers: int = 1) -> PredictionSet:
    """One score per (segment, localizable class); deterministic, order-stable.

    `workers` > 1 scores segments in a thread pool; results are assembled
    in input order so the output is identical at any parallelism degree.
    """
    localizable = vocab.localizable_ids

    def score(seg: Segment):
        scores, _ = forward(model, seg.frames)
        return [(seg.key, c, float(scores[c])) for c in localizable]

    if workers > 1 and len(segments) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(score, segments))
    else:
        chunks = [score(seg) for seg in segments]
    return PredictionSet([entry for chunk in chunks for entry in chunk])


def ensemble_blend(prediction_sets: list[PredictionSet], weights) -> PredictionSet:
    """Convex per-key blend of prediction sets covering identical keys."""
    if not prediction_sets:
        raise ValueError("ensemble needs at least one prediction set")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(prediction_sets),):
        raise ValueError(f"{len(prediction_sets)} prediction sets but {weights.size} weights")
    if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("ensemble weights must be nonnegative and sum to 1 within 1e-9")
    keys = prediction_sets[0].key_set
    for i, ps in enumerate(prediction_sets[1:], start=1):
        if ps.key_set != keys:
            raise ValueError(f"prediction set {i} covers different (segment, class) keys")
    maps = [ps.as_dict() for ps in prediction_sets]
    entries = [
        (segment_id, class_id, float(sum(w * m[(segment_id, class_id)] for w, m in zip(weights, maps))))
        for segment_id, class_id in sorted(keys)
    ]
    return PredictionSet(entries)


def submission_text(pred: PredictionSet) -> str:
    """CSV body, rows sorted by (class_id asc, score desc, segment_id asc)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class_id", "segment_id", "score"])
    for segment_id, class_id, score in sorted(pred.entries, key=lambda e: (e[1], -e[2], e[0])):
        writer.writerow([class_id, segment_id, repr(score)])
    return buf.getvalue()


def write_submission(pred: PredictionSet, path: str) -> None:
    atomic_write_text(path, submission_text(pred))


def read_submission(path: str) -> PredictionSet:
    """Parse a submission CSV back into a PredictionSet."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["class_id", "segment_id", "score"]:
            raise ValueError(f"{path}: bad submission header {header!r}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}: line {line_no}: expected 3 columns")
            try:
                entries.append((row[1], int(row[0]), float(row[2])))
            except ValueError:
                raise ValueError(f"{path}: line {line_no}: bad class id or score") from None
    return PredictionSet(entries)


def metric_report(mean_ap: float, per_class: list[dict]) -> dict:
    return {"map": mean_ap, "per_class": per_class}
