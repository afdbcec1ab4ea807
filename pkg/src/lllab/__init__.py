"""Lifelong language learning with teacher distillation, on a small numpy autodiff engine."""

from .autodiff import Tensor, Tape, backward, no_grad
from .distill import LossKind
from .lifelong import RunReport, StreamConfig, run_method
from .model import LanguageModel, ModelConfig
from .taskdata import TaskDataset, TaskSpec, Vocabulary, generate_task

__all__ = [
    "Tensor", "Tape", "backward", "no_grad", "LossKind", "RunReport", "StreamConfig",
    "run_method", "LanguageModel", "ModelConfig", "TaskDataset", "TaskSpec", "Vocabulary",
    "generate_task",
]
