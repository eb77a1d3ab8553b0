"""Preference fine-tuning with multiple negatives over a tiny numpy transformer."""

from .data import GeneratorConfig, PreferenceExample, generate
from .evaluator import EvaluationReport, evaluate
from .model import ModelConfig, ModelParameters, init_model
from .objectives import Method, ObjectiveConfig
from .trainer import TrainConfig, TrainingTrace, train

__all__ = [
    "EvaluationReport", "GeneratorConfig", "Method", "ModelConfig", "ModelParameters",
    "ObjectiveConfig", "PreferenceExample", "TrainConfig", "TrainingTrace",
    "evaluate", "generate", "init_model", "train",
]
