"""Multimodal emotion recognition in conversation on precomputed utterance features.

Modules: ``autodiff`` (tape-based gradients), ``data`` (feature files, synthetic
corpora, batching), ``encoder``, ``cma``, ``fusion``, ``objectives``, ``model``,
``training``, ``metrics``, ``checkpoint``, ``plotting`` and ``cli``.
"""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, SynthConfig, generate_synthetic, load_dataset, make_batches, write_dataset
from .metrics import Metrics, compute_metrics
from .model import CmathModel, DataShape, TrainConfig
from .training import ablate, evaluate, export_embeddings, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CmathModel", "DataShape", "Dataset", "Metrics", "SynthConfig", "TrainConfig",
    "ablate", "compute_metrics", "evaluate", "export_embeddings", "generate_synthetic", "load_checkpoint",
    "load_dataset", "make_batches", "save_checkpoint", "train", "write_dataset",
]
