"""Multi-annotator text classification with learned annotator and
annotation embeddings."""

from .corpus import (
    AnnotatedExample,
    Dataset,
    Split,
    dataset_statistics,
    load_dataset,
    make_annotation_split,
    make_annotator_split,
    write_dataset,
)
from .embedding import CombinationMode, EmbeddingBank, parameter_overhead
from .encoder import EncoderConfig, Vocabulary
from .synthgen import PopulationConfig, generate_population
from .trainer import EvalReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AnnotatedExample",
    "CombinationMode",
    "Dataset",
    "EmbeddingBank",
    "EncoderConfig",
    "EvalReport",
    "PopulationConfig",
    "Split",
    "TrainConfig",
    "Vocabulary",
    "dataset_statistics",
    "evaluate",
    "generate_population",
    "load_dataset",
    "make_annotation_split",
    "make_annotator_split",
    "parameter_overhead",
    "train",
    "write_dataset",
]
