"""Pointer-generator summarization with attention refinement and variance losses."""

from .data import TaskConfig, Vocabulary, synth_task_generate
from .estimator import VarianceSummarizer
from .harness import TrainConfig, evaluate, run_ablation, train
from .model import ModelConfig, ModelParams

__all__ = [
    "ModelConfig",
    "ModelParams",
    "TaskConfig",
    "TrainConfig",
    "VarianceSummarizer",
    "Vocabulary",
    "evaluate",
    "run_ablation",
    "synth_task_generate",
    "train",
]
__version__ = "0.1.0"
