"""Bags, segments, vocabularies, frame sampling, dataset files, synthetic corpus.

A bag is a whole video: a ``K x D`` frame-feature matrix with a multi-hot
label vector over ``n`` classes. A segment is a fixed 5-frame window of a
bag. The synthetic corpus generator plants class "prototype" directions
into known frame windows of otherwise pure-noise bags, so temporal
localization has a recoverable ground truth at desk scale.

Dataset files are line-delimited JSON, one record per line; floats are
written with their shortest round-trip representation so load(save(x))
reproduces x bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ioutil import atomic_write_text

SEGMENT_LENGTH = 5
EDGE_EXCLUSION = 15  # head/tail frames skipped by sampling when K > 2 * 15
MIN_POSITIVE_OVERLAP = 3  # frames of overlap with a planted window for a positive label
FRAME_JITTER = 0.3  # within-cell noise share; frames of one 5-frame cell stay correlated

# sub-stream tags for per-entity RNGs derived from (seed, stream, split, index)
_STREAM_PROTOTYPES = 0
_STREAM_BAG = 1
_STREAM_SEGMENTS = 2

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised for malformed dataset files; message carries the line number."""


@dataclass(eq=False)
class Bag:
    """A video: id, K x D frame features, multi-hot labels over n classes."""

    id: str
    frames: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"bag {self.id!r}: frames must be a nonempty K x D matrix")
        if self.labels.ndim != 1 or not np.isin(self.labels, (0, 1)).all():
            raise ValueError(f"bag {self.id!r}: labels must be a multi-hot 0/1 vector")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Bag)
            and self.id == other.id
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class Segment:
    """A 5-frame window of a bag with its own multi-hot labels."""

    video_id: str
    start_index: int
    frames: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.start_index < 0:
            raise ValueError(f"segment of {self.video_id!r}: negative start index")
        if self.frames.ndim != 2 or self.frames.shape[0] != SEGMENT_LENGTH:
            raise ValueError(
                f"segment of {self.video_id!r} at {self.start_index}: "
                f"expected exactly {SEGMENT_LENGTH} frame rows, got {self.frames.shape}"
            )
        if self.labels.ndim != 1 or not np.isin(self.labels, (0, 1)).all():
            raise ValueError(f"segment of {self.video_id!r}: labels must be multi-hot 0/1")

    @property
    def key(self) -> str:
        """Unique id used in prediction sets and submissions."""
        return f"{self.video_id}:{self.start_index}"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Segment)
            and self.video_id == other.video_id
            and self.start_index == other.start_index
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class Vocabulary:
    """Class count, the localizable (segment-evaluated) subset, per-class loss weights."""

    class_count: int
    localizable_mask: np.ndarray
    class_weights: np.ndarray

    def __post_init__(self):
        self.localizable_mask = np.asarray(self.localizable_mask, dtype=bool)
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if self.localizable_mask.shape != (self.class_count,):
            raise ValueError("localizable mask length must equal class count")
        if not self.localizable_mask.any():
            raise ValueError("at least one class must be localizable")
        if self.class_weights.shape != (self.class_count,) or not (self.class_weights > 0).all():
            raise ValueError("class weights must be strictly positive, one per class")

    @property
    def localizable_ids(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.localizable_mask)]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.class_count == other.class_count
            and np.array_equal(self.localizable_mask, other.localizable_mask)
            and np.array_equal(self.class_weights, other.class_weights)
        )


def make_vocabulary(
    class_count: int,
    localizable_ids: list[int] | None = None,
    localizable_weight: float = 3.0,
    base_weight: float = 1.0,
) -> Vocabulary:
    """Vocabulary with up-weighted localizable classes (all classes by default)."""
    mask = np.zeros(class_count, dtype=bool)
    if localizable_ids is None:
        mask[:] = True
    else:
        mask[np.asarray(localizable_ids, dtype=int)] = True
    weights = np.where(mask, float(localizable_weight), float(base_weight))
    return Vocabulary(class_count=class_count, localizable_mask=mask, class_weights=weights)


@dataclass
class SamplingScheme:
    """Frame sampling: uniform with replacement ('random', needs count) or 'one_in_five'."""

    kind: str
    count: int | None = None

    def __post_init__(self):
        if self.kind not in ("random_with_replacement", "one_in_five"):
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        if self.kind == "random_with_replacement" and (self.count is None or self.count < 1):
            raise ValueError("random_with_replacement needs a positive sample count")

    @classmethod
    def parse(cls, text: str) -> "SamplingScheme":
        """Parse CLI syntax: 'random:120' or 'one-in-five'."""
        if text == "one-in-five":
            return cls("one_in_five")
        if text.startswith("random:"):
            return cls("random_with_replacement", int(text.split(":", 1)[1]))
        raise ValueError(f"bad sampling spec {text!r}; expected 'random:N' or 'one-in-five'")

    def spec(self) -> str:
        if self.kind == "one_in_five":
            return "one-in-five"
        return f"random:{self.count}"


def eligible_frame_range(frame_count: int) -> tuple[int, int]:
    """Half-open index range sampling may draw from.

    The first and last 15 frames are excluded, unless the bag is too short
    (K <= 30) in which case the whole bag is eligible.
    """
    if frame_count > 2 * EDGE_EXCLUSION:
        return EDGE_EXCLUSION, frame_count - EDGE_EXCLUSION
    return 0, frame_count


def sample_frames(bag: Bag, scheme: SamplingScheme, seed=0) -> np.ndarray:
    """Frame indices to train on. one_in_five is deterministic; random uses `seed`."""
    lo, hi = eligible_frame_range(bag.frame_count)
    if scheme.kind == "one_in_five":
        return np.arange(lo, hi, 5, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return rng.integers(lo, hi, size=scheme.count, dtype=np.int64)


def extract_segment(bag: Bag, start_index: int, labels: np.ndarray | None = None) -> Segment:
    """Copy the 5-frame window [start_index, start_index+5) out of a bag."""
    if start_index < 0 or start_index + SEGMENT_LENGTH > bag.frame_count:
        raise ValueError(
            f"segment [{start_index}, {start_index + SEGMENT_LENGTH}) out of range "
            f"for bag {bag.id!r} with {bag.frame_count} frames"
        )
    if labels is None:
        labels = np.zeros_like(bag.labels)
    return Segment(
        video_id=bag.id,
        start_index=int(start_index),
        frames=bag.frames[start_index : start_index + SEGMENT_LENGTH].copy(),
        labels=labels,
    )


# ---------------------------------------------------------------------------
# synthetic planted-segment corpus


@dataclass
class SyntheticConfig:
    """Knobs for the planted-segment corpus. Identical config => identical corpus."""

    class_count: int = 10
    feature_dim: int = 16
    bags_per_split: int = 200
    frames_per_bag: tuple[int, int] = (40, 80)
    labels_per_bag: tuple[int, int] = (1, 2)
    prototype_strength: float = 5.0
    planted_segment_length: int = SEGMENT_LENGTH
    rng_seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2 (prototypes need separable directions)")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2 (prototypes need separable directions)")
        if self.bags_per_split < 1 or self.planted_segment_length < 1:
            raise ValueError("counts must be >= 1")
        if self.prototype_strength <= 0:
            raise ValueError("prototype_strength must be > 0")
        kmin, kmax = self.frames_per_bag
        lmin, lmax = self.labels_per_bag
        if not (1 <= kmin <= kmax) or not (1 <= lmin <= lmax):
            raise ValueError("frames_per_bag and labels_per_bag must be nondecreasing ranges >= 1")
        if lmax > self.class_count:
            raise ValueError("labels_per_bag exceeds class_count")
        if kmin < lmax * self.planted_segment_length:
            raise ValueError(
                "frames_per_bag minimum too small to plant one window per label: "
                f"need >= {lmax * self.planted_segment_length}"
            )


def class_prototypes(config: SyntheticConfig) -> np.ndarray:
    """Unit-norm class direction per class, (n, D), fixed by the corpus seed.

    Mutually orthogonal (random orthonormal frame) whenever the feature
    dimension allows, so no two classes are confusable by construction;
    with more classes than dimensions they fall back to independent random
    unit vectors.
    """
    rng = np.random.default_rng([config.rng_seed, _STREAM_PROTOTYPES])
    protos = rng.standard_normal((config.class_count, config.feature_dim))
    if config.class_count <= config.feature_dim:
        q, r = np.linalg.qr(protos.T)
        protos = (q * np.sign(np.diag(r))).T
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _split_code(split: str) -> int:
    try:
        return SPLITS.index(split) + 1
    except ValueError:
        raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}") from None


def _make_bag(config: SyntheticConfig, protos: np.ndarray, split: str, index: int):
    """One bag plus its planted windows [(class_id, start_frame), ...].

    Windows sit on the 5-frame grid, one grid cell per positive label, so
    sampled segments overlap a window either fully or not at all and
    segment labels are unambiguous. Noise is drawn per grid cell and
    shared by the cell's frames up to a small jitter (unit marginal
    variance either way): consecutive frames of 1 Hz video features are
    strongly correlated, and per-frame independent noise would let a
    renormalized attention cherry-pick the most class-like noise frame
    inside a segment, an artifact real footage does not offer.
    """
    rng = np.random.default_rng([config.rng_seed, _STREAM_BAG, _split_code(split), index])
    kmin, kmax = config.frames_per_bag
    lmin, lmax = config.labels_per_bag
    seg_len = config.planted_segment_length

    frame_count = int(rng.integers(kmin, kmax + 1))
    label_count = int(rng.integers(lmin, lmax + 1))
    classes = rng.choice(config.class_count, size=label_count, replace=False)
    cell_count = -(-frame_count // seg_len)  # ceil; a trailing partial cell is its own draw
    base = rng.standard_normal((cell_count, config.feature_dim))
    frames = np.sqrt(1.0 - FRAME_JITTER**2) * np.repeat(base, seg_len, axis=0)[:frame_count]
    frames += FRAME_JITTER * rng.standard_normal((frame_count, config.feature_dim))

    cells = frame_count // seg_len
    chosen = rng.choice(cells, size=label_count, replace=False)
    plants = []
    for class_id, cell in zip(classes, chosen):
        start = int(cell) * seg_len
        frames[start : start + seg_len] += config.prototype_strength * protos[class_id]
        plants.append((int(class_id), start))
    plants.sort(key=lambda p: p[1])

    labels = np.zeros(config.class_count, dtype=np.int64)
    labels[classes] = 1
    bag = Bag(id=f"{split}{index:04d}", frames=frames, labels=labels)
    return bag, plants


def window_overlap_labels(
    start_index: int,
    plants: list[tuple[int, int]],
    class_count: int,
    window_length: int = SEGMENT_LENGTH,
) -> np.ndarray:
    """Multi-hot labels: class c is positive iff the window shares >= 3 frames
    with a planted window of c."""
    labels = np.zeros(class_count, dtype=np.int64)
    end = start_index + window_length
    for class_id, plant_start in plants:
        overlap = min(end, plant_start + window_length) - max(start_index, plant_start)
        if overlap >= MIN_POSITIVE_OVERLAP:
            labels[class_id] = 1
    return labels


def synthetic_bags(config: SyntheticConfig, split: str):
    """All bags of one split plus {bag_id: planted windows}; pure in (config, split)."""
    protos = class_prototypes(config)
    bags, plant_map = [], {}
    for i in range(config.bags_per_split):
        bag, plants = _make_bag(config, protos, split, i)
        bags.append(bag)
        plant_map[bag.id] = plants
    return bags, plant_map


def planted_windows(config: SyntheticConfig) -> dict[str, list[tuple[int, int]]]:
    """Planted (class_id, start) windows for every bag of every split."""
    out: dict[str, list[tuple[int, int]]] = {}
    for split in SPLITS:
        out.update(synthetic_bags(config, split)[1])
    return out


def _bag_segments(config: SyntheticConfig, bag: Bag, plants, split: str, index: int, uniform: int, include_plants: bool):
    """Segments of one bag: optionally one per planted window, plus uniform grid cells."""
    rng = np.random.default_rng([config.rng_seed, _STREAM_SEGMENTS, _split_code(split), index])
    seg_len = config.planted_segment_length
    cells = bag.frame_count // seg_len
    starts = set()
    if include_plants:
        starts.update(start for _, start in plants)
    if uniform > 0:
        drawn = rng.choice(cells, size=min(uniform, cells), replace=False)
        starts.update(int(c) * seg_len for c in drawn)
    segments = []
    for start in sorted(starts):
        labels = window_overlap_labels(start, plants, config.class_count, seg_len)
        segments.append(extract_segment(bag, start, labels))
    return segments


def generate_synthetic_corpus(config: SyntheticConfig):
    """(train_bags, labeled_segments, test_segments) for a planted-segment corpus.

    Train bags carry only bag-level labels. Labeled segments (the
    fine-tuning set) come from a held-out bag split and include one
    segment per planted window plus uniformly drawn grid cells, mimicking
    a verification set built to contain both positives and negatives.
    Test segments are drawn uniformly over grid cells.
    """
    train_bags, _ = synthetic_bags(config, "train")

    val_bags, val_plants = synthetic_bags(config, "val")
    labeled_segments = []
    for i, bag in enumerate(val_bags):
        labeled_segments.extend(
            _bag_segments(config, bag, val_plants[bag.id], "val", i, uniform=4, include_plants=True)
        )

    test_bags, test_plants = synthetic_bags(config, "test")
    test_segments = []
    for i, bag in enumerate(test_bags):
        test_segments.extend(
            _bag_segments(config, bag, test_plants[bag.id], "test", i, uniform=5, include_plants=False)
        )
    return train_bags, labeled_segments, test_segments


# ---------------------------------------------------------------------------
# dataset files: line-delimited JSON


def _labels_to_ids(labels: np.ndarray) -> list[int]:
    return [int(c) for c in np.flatnonzero(labels)]


def _ids_to_multihot(ids, class_count: int, line_no: int) -> np.ndarray:
    labels = np.zeros(class_count, dtype=np.int64)
    for c in ids:
        if not isinstance(c, int) or not (0 <= c < class_count):
            raise DatasetError(f"line {line_no}: label id {c!r} outside [0, {class_count})")
        labels[c] = 1
    return labels


def _record_frames(obj, line_no: int) -> np.ndarray:
    frames = obj.get("frames")
    if not isinstance(frames, list) or not frames or not all(isinstance(r, list) for r in frames):
        raise DatasetError(f"line {line_no}: 'frames' must be a nonempty list of rows")
    width = len(frames[0])
    if width < 1 or any(len(r) != width for r in frames):
        raise DatasetError(f"line {line_no}: frame rows disagree on feature dimension")
    arr = np.asarray(frames, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise DatasetError(f"line {line_no}: non-finite frame value")
    return arr


def record_to_item(obj: dict, class_count: int, line_no: int = 0):
    """One parsed JSON record to a Bag or Segment, validating invariants."""
    if not isinstance(obj, dict):
        raise DatasetError(f"line {line_no}: record must be a JSON object")
    frames = _record_frames(obj, line_no)
    labels = _ids_to_multihot(obj.get("labels", []), class_count, line_no)
    if "id" in obj:
        return Bag(id=str(obj["id"]), frames=frames, labels=labels)
    if "video_id" in obj:
        start = obj.get("start")
        if not isinstance(start, int) or start < 0:
            raise DatasetError(f"line {line_no}: segment 'start' must be a nonnegative integer")
        if frames.shape[0] != SEGMENT_LENGTH:
            raise DatasetError(
                f"line {line_no}: segment {obj['video_id']!r}@{start} has "
                f"{frames.shape[0]} frames, expected {SEGMENT_LENGTH}"
            )
        return Segment(video_id=str(obj["video_id"]), start_index=start, frames=frames, labels=labels)
    raise DatasetError(f"line {line_no}: record has neither 'id' (bag) nor 'video_id' (segment)")


def item_to_record(item) -> dict:
    if isinstance(item, Bag):
        return {"id": item.id, "labels": _labels_to_ids(item.labels), "frames": item.frames.tolist()}
    if isinstance(item, Segment):
        return {
            "video_id": item.video_id,
            "start": item.start_index,
            "labels": _labels_to_ids(item.labels),
            "frames": item.frames.tolist(),
        }
    raise TypeError(f"cannot serialize {type(item).__name__}")


def save_dataset(path: str, items) -> None:
    """Write bags/segments as line-delimited JSON, one record per line, atomically."""
    lines = [json.dumps(item_to_record(item), separators=(",", ":")) for item in items]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_dataset(path: str, class_count: int):
    """Read a line-delimited JSON dataset back; class_count fixes the label width."""
    items = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            try:
                items.append(record_to_item(obj, class_count, line_no))
            except DatasetError:
                raise
            except ValueError as exc:
                raise DatasetError(f"line {line_no}: {exc}") from None
    return items


def save_vocabulary(path: str, vocab: Vocabulary) -> None:
    record = {
        "n": vocab.class_count,
        "localizable": vocab.localizable_ids,
        "weights": vocab.class_weights.tolist(),
    }
    atomic_write_text(path, json.dumps(record) + "\n")


def load_vocabulary(path: str) -> Vocabulary:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"vocabulary file {path}: invalid JSON ({exc.msg})") from None
    try:
        n = obj["n"]
        mask = np.zeros(n, dtype=bool)
        mask[np.asarray(obj["localizable"], dtype=int)] = True
        return Vocabulary(class_count=n, localizable_mask=mask, class_weights=np.asarray(obj["weights"]))
    except (KeyError, TypeError, IndexError) as exc:
        raise DatasetError(f"vocabulary file {path}: {exc!r}") from None
