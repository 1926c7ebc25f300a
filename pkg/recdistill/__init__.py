"""Confident soft-label distillation for sequential recommenders."""
from .corpus import (
    InteractionLog,
    PopularityBins,
    SequenceSample,
    build_sequences,
    filter_min_interactions,
    load_interactions,
    partition,
    popularity_bins,
    remove_users,
    subsample,
)
from .distill import DistillConfig, make_soft_labels, student_loss, train_base, train_student
from .errors import (
    ConfigError,
    ConsistencyError,
    DataError,
    EvaluationError,
    RecDistillError,
    TrainingError,
)
from .metrics import (
    MetricReport,
    RankResult,
    aggregate_seeds,
    filtered_metrics,
    grouped_report,
    ndcg_at_n,
    rank_all,
    recall_at_n,
)
from .runner import ExperimentConfig, ExperimentWorker, load_config
from .seqmodel import ModelSpec, TrainConfig, cross_entropy_loss, fit, predict_topn
from .synthbench import OracleWorld, WorldSpec, build_world, generate, oracle_distribution, oracle_gap
from .teacher import (
    NoiseModel,
    SoftLogitCache,
    TeacherConfig,
    kl_divergence,
    robust_loss,
    train_data_level,
    train_model_level,
    train_popularity_baseline,
    train_training_level,
)

__all__ = [
    "InteractionLog", "PopularityBins", "SequenceSample", "build_sequences",
    "filter_min_interactions", "load_interactions", "partition", "popularity_bins",
    "remove_users", "subsample",
    "DistillConfig", "make_soft_labels", "student_loss", "train_base", "train_student",
    "ConfigError", "ConsistencyError", "DataError", "EvaluationError", "RecDistillError",
    "TrainingError",
    "MetricReport", "RankResult", "aggregate_seeds", "filtered_metrics", "grouped_report",
    "ndcg_at_n", "rank_all", "recall_at_n",
    "ExperimentConfig", "ExperimentWorker", "load_config",
    "ModelSpec", "TrainConfig", "cross_entropy_loss", "fit", "predict_topn",
    "OracleWorld", "WorldSpec", "build_world", "generate", "oracle_distribution", "oracle_gap",
    "NoiseModel", "SoftLogitCache", "TeacherConfig", "kl_divergence", "robust_loss",
    "train_data_level", "train_model_level", "train_popularity_baseline", "train_training_level",
]
