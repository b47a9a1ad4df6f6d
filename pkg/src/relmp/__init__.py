"""Relation prediction on knowledge graphs from relational context and relational paths."""
from .kg import Dataset, KnowledgeGraph, ParseError, degree_stats, load_dataset, make_inductive_split
from .metrics import RankReport, evaluate, rank_relations
from .model import ConfigError, LossReport, ModelConfig, RelationModel
from .paths import PathVocabulary, aggregate_paths, build_vocabulary, enumerate_paths, path_representation
from .train import TrainConfig, train

__all__ = [
    "ConfigError", "Dataset", "KnowledgeGraph", "LossReport", "ModelConfig", "ParseError", "PathVocabulary",
    "RankReport", "RelationModel", "TrainConfig", "aggregate_paths", "build_vocabulary", "degree_stats",
    "enumerate_paths", "evaluate", "load_dataset", "make_inductive_split", "path_representation",
    "rank_relations", "train",
]
__version__ = "0.1.0"
