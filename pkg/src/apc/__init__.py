"""Abductive prediction correction for sequential recommenders."""

__version__ = "0.1.0"

from .correct import (
    CandidateShortlist,
    CorrectionConfig,
    CorrectionResult,
    FusionWeights,
    ScoreVector,
    abduction_loss,
    correct_batch,
    correct_user,
    dummy_embedding,
    fusion_weights,
    rerank,
    score_gradient,
    shortlist,
)
from .data import (
    Catalog,
    EventLog,
    InteractionSequence,
    SequenceDataset,
    build_split_sequences,
    k_core_filter,
    load_dataset,
    load_events,
    reverse_dataset,
    save_dataset,
)
from .evaluate import MetricReport, rank_metrics, run_experiment, sweep
from .model import (
    EmbeddedSequence,
    SequentialScorer,
    embed_sequence,
    load_checkpoint,
    loss_and_input_gradient,
    position_logprobs,
    save_checkpoint,
    score_candidates,
)
from .train import TrainConfig, train_model, train_pair
