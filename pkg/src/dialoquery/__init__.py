"""Weakly supervised induction of knowledge-base queries from dialogs."""

__version__ = "0.1.0"

from .dialog import Dialog, DialogContext, Turn, heuristic_position, load_corpus, subsequent_entities
from .estimators import BufferPair, GradientEstimate, ReplayBuffer, clip_buffer_probs
from .explore import ExplorationResult, candidate_clauses, systematic_explore
from .kb import KnowledgeBase, Query, ResultSet, canonicalize, execute, load_kb, parse_query, serialize
from .metrics import (
    MetricsReport,
    evaluate,
    greedy_query,
    piq_ratio,
    prepare_dialogs,
    query_accuracy,
    total_reward,
)
from .policy import FeatureTemplate, PolicyParameters, beam_search, randomized_beam_search, sample
from .position import PositionModel, position_metrics, predict_position, train_position
from .reward import precision, recall, reward
from .synth import BenchConfig, Benchmark, generate, verify_gold
from .train import ESTIMATORS, TrainConfig, TrainResult, train

__all__ = [
    "BenchConfig",
    "Benchmark",
    "BufferPair",
    "Dialog",
    "DialogContext",
    "ESTIMATORS",
    "ExplorationResult",
    "FeatureTemplate",
    "GradientEstimate",
    "KnowledgeBase",
    "MetricsReport",
    "PolicyParameters",
    "PositionModel",
    "Query",
    "ReplayBuffer",
    "ResultSet",
    "TrainConfig",
    "TrainResult",
    "Turn",
    "beam_search",
    "candidate_clauses",
    "canonicalize",
    "clip_buffer_probs",
    "evaluate",
    "execute",
    "generate",
    "greedy_query",
    "heuristic_position",
    "load_corpus",
    "load_kb",
    "parse_query",
    "piq_ratio",
    "position_metrics",
    "precision",
    "predict_position",
    "prepare_dialogs",
    "query_accuracy",
    "randomized_beam_search",
    "recall",
    "reward",
    "sample",
    "serialize",
    "subsequent_entities",
    "systematic_explore",
    "total_reward",
    "train",
    "train_position",
    "verify_gold",
]
