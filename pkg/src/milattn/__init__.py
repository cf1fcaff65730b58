"""Attention-based multiple-instance multi-label learning with temporal localization."""

__version__ = "0.1.0"

from .datamodel import (
    Bag,
    SamplingScheme,
    Segment,
    SyntheticConfig,
    Vocabulary,
    extract_segment,
    generate_synthetic_corpus,
    load_dataset,
    make_vocabulary,
    sample_frames,
    save_dataset,
)
from .evaluation import (
    GroundTruth,
    MetricConfig,
    PredictionSet,
    average_precision_at_k,
    ensemble_blend,
    map_at_k,
    predict_segments,
    read_submission,
    write_submission,
)
from .pooling import (
    AttentionHead,
    MultiAttention,
    attention_pool,
    attention_weights,
    gated_attention_weights,
    max_pool,
    mean_pool,
    multi_attention_pool,
    pooling_backward,
    softmax,
    sparsemax,
)
from .training import (
    AdamState,
    ModelParams,
    TrainConfig,
    adam_step,
    finetune_phase2,
    forward,
    gradient_check,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_phase1,
)

__all__ = [name for name in dir() if not name.startswith("_")]
