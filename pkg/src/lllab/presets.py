"""Desk-scale experiment presets: the three-task synthetic stream and its config."""

from __future__ import annotations

from dataclasses import replace

from .lifelong import StreamConfig
from .taskdata import TaskDataset, TaskSpec, build_vocabulary, generate_task

LETTERS = tuple("abcdefgh")
DIGITS = tuple("01234567")
# copy gets its own letters: over the same alphabet as reverse, copy and
# reverse differ only in their begin/question tokens and the later task
# overwrites the earlier one almost regardless of replay
COPY_LETTERS = tuple("ijklmnop")


def desk_specs(n_train: int = 1000, n_test: int = 100, seed: int = 0) -> list[TaskSpec]:
    return [
        TaskSpec("reverse", "reverse", LETTERS, 3, 5, n_train, n_test, seed),
        TaskSpec("sort", "sort", DIGITS, 3, 5, n_train, n_test, seed + 1),
        TaskSpec("copy", "copy", COPY_LETTERS, 3, 5, n_train, n_test, seed + 2),
    ]


def make_tasks(specs: list[TaskSpec]) -> list[TaskDataset]:
    vocab = build_vocabulary(specs)
    return [generate_task(s, vocab) for s in specs]


def desk_tasks(**kw) -> list[TaskDataset]:
    return make_tasks(desk_specs(**kw))


# Training from scratch needs a far larger step size and a longer warmup
# than fine-tuning a pretrained model; the rest keeps the library defaults.
DESK_CONFIG = StreamConfig(
    order=("reverse", "sort", "copy"),
    batch_size=8,
    context_len=32,
    lr=7e-4,
    warmup_ratio=0.05,
)


def desk_config(**overrides) -> StreamConfig:
    return replace(DESK_CONFIG, **overrides)
