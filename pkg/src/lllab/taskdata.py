"""Vocabulary, the context/question/answer sequence encoding, and synthetic tasks.

Every sample is one language-model sequence::

    [BOS_task] context question [ANS] answer [EOS]

so the same encoding serves answer prediction (loss from the answer onset)
and whole-sequence modeling (loss from the first token), and lets the model
generate pseudo-samples for a task from its begin token alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, EOS, ANS = "<pad>", "<eos>", "<ans>"
PAD_ID, EOS_ID, ANS_ID = 0, 1, 2
GENERATOR_KINDS = ("copy", "reverse", "sort", "add_mod", "slot_fill", "classify")
QUESTION_WORDS = {
    "copy": "copy", "reverse": "rev", "sort": "sort",
    "add_mod": "sum", "slot_fill": "find", "classify": "which",
}
CLASS_LABELS = ("lo", "hi")
DEFAULT_METRIC = {"slot_fill": "token_f1"}


class VocabularyError(KeyError):
    pass


def bos_token(task_id: str) -> str:
    return f"<bos:{task_id}>"


class Vocabulary:
    """Fixed token inventory shared by every task of a run.

    Ids 0, 1, 2 are PAD, EOS and ANS; one begin token per task follows, then
    the content tokens.
    """

    def __init__(self, task_ids: Sequence[str], content: Iterable[str]):
        specials = [PAD, EOS, ANS] + [bos_token(t) for t in task_ids]
        content = [c for c in dict.fromkeys(content)]
        clash = set(specials) & set(content)
        if clash:
            raise ValueError(f"content tokens collide with special tokens: {sorted(clash)}")
        if len(set(task_ids)) != len(task_ids):
            raise ValueError(f"duplicate task ids: {list(task_ids)}")
        self.task_ids = tuple(task_ids)
        self.tokens = tuple(specials + content)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = PAD_ID
        self.eos_id = EOS_ID
        self.ans_id = ANS_ID
        self.bos_ids = {t: self._index[bos_token(t)] for t in task_ids}
        self._bos_to_task = {i: t for t, i in self.bos_ids.items()}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(3 + len(self.task_ids)))

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def encode(self, text: str | Sequence[str]) -> tuple[int, ...]:
        toks = text.split() if isinstance(text, str) else list(text)
        return tuple(self.id(t) for t in toks)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def task_of_bos(self, token_id: int) -> str | None:
        return self._bos_to_task.get(int(token_id))

    def to_dict(self) -> dict:
        return {"task_ids": list(self.task_ids),
                "content": list(self.tokens[3 + len(self.task_ids):])}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["task_ids"], d["content"])


@dataclass(frozen=True)
class Sample:
    task_id: str
    context: tuple[int, ...]
    question: tuple[int, ...]
    answer: tuple[int, ...]
    encoded: tuple[int, ...]
    a1: int
    truncated: bool = False

    @property
    def T(self) -> int:
        return len(self.encoded)

    @property
    def prefix(self) -> tuple[int, ...]:
        """Tokens up to and including ANS, i.e. the decoding prompt."""
        return self.encoded[:self.a1]


def _build(vocab: Vocabulary, task_id, context, question, answer, truncated=False) -> Sample:
    encoded = ((vocab.bos_ids[task_id],) + tuple(context) + tuple(question)
               + (vocab.ans_id,) + tuple(answer) + (vocab.eos_id,))
    a1 = 1 + len(context) + len(question) + 1
    return Sample(task_id, tuple(context), tuple(question), tuple(answer), encoded, a1, truncated)


def encode_sample(vocab: Vocabulary, task_id: str, context, question, answer,
                  context_len: int | None = None) -> Sample:
    """Encode strings (whitespace tokenized) or token lists into a :class:`Sample`."""
    if task_id not in vocab.bos_ids:
        raise VocabularyError(f"task {task_id!r} has no begin token in the vocabulary")
    parts = [vocab.encode(p) if not _is_ids(p) else tuple(int(i) for i in p)
             for p in (context, question, answer)]
    sample = _build(vocab, task_id, *parts)
    if context_len is not None and sample.T > context_len:
        raise ValueError(f"encoded length {sample.T} exceeds context_len {context_len} "
                         f"(context {len(parts[0])}, question {len(parts[1])}, answer {len(parts[2])})")
    return sample


def _is_ids(part) -> bool:
    return not isinstance(part, str) and all(isinstance(i, (int, np.integer)) for i in part)


def decode_sample(vocab: Vocabulary, sample: Sample) -> tuple[str, str, str, str]:
    """Inverse of :func:`encode_sample`: ``(task_id, context, question, answer)``."""
    return (sample.task_id, vocab.decode(sample.context), vocab.decode(sample.question),
            vocab.decode(sample.answer))


def make_lm_prefix(vocab: Vocabulary, task_id: str) -> list[int]:
    if task_id not in vocab.bos_ids:
        raise VocabularyError(f"unknown task {task_id!r}")
    return [vocab.bos_ids[task_id]]


@dataclass(frozen=True)
class Reject:
    reason: str


def parse_pseudo(vocab: Vocabulary, generated: Sequence[int]) -> Sample | Reject:
    """Turn a generated sequence (begin token included) back into a Sample.

    The model does not mark where the context ends and the question starts,
    so everything between the begin token and ANS lands in ``context``; the
    encoded sequence and answer offset are exact either way.
    """
    gen = [int(t) for t in generated]
    if not gen or vocab.task_of_bos(gen[0]) is None:
        return Reject("no begin token")
    task_id = vocab.task_of_bos(gen[0])
    body = gen[1:]
    if body.count(vocab.ans_id) == 0:
        return Reject("no answer separator")
    if body.count(vocab.ans_id) > 1:
        return Reject("multiple answer separators")
    if not body or body[-1] != vocab.eos_id:
        return Reject("not terminated by EOS")
    if body.count(vocab.eos_id) > 1:
        return Reject("EOS before end")
    specials = vocab.special_ids - {vocab.ans_id, vocab.eos_id}
    if any(t in specials for t in body):
        return Reject("special token inside body")
    cut = body.index(vocab.ans_id)
    answer = body[cut + 1:-1]
    if not answer:
        return Reject("empty answer")
    return _build(vocab, task_id, body[:cut], (), answer)


# ------------------------------------------------------------------- tasks


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    alphabet: tuple[str, ...]
    min_len: int = 3
    max_len: int = 5
    n_train: int = 400
    n_test: int = 100
    seed: int = 0
    metric: str | None = None

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("n_train and n_test must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        if self.metric is None:
            object.__setattr__(self, "metric", DEFAULT_METRIC.get(self.kind, "exact_match"))

    @property
    def question_word(self) -> str:
        return QUESTION_WORDS[self.kind]

    def content_tokens(self) -> list[str]:
        toks = list(self.alphabet) + [self.question_word]
        if self.kind == "classify":
            toks += list(CLASS_LABELS)
        return toks

    def max_encoded_len(self) -> int:
        answer = {"copy": self.max_len, "reverse": self.max_len, "sort": self.max_len,
                  "add_mod": 1, "slot_fill": 1, "classify": 1}[self.kind]
        question = 2 if self.kind == "slot_fill" else 1
        return 1 + self.max_len + question + 1 + answer + 1

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["alphabet"] = list(self.alphabet)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        if isinstance(d.get("alphabet"), str):
            d["alphabet"] = d["alphabet"].split()
        return cls(**d)


@dataclass(frozen=True)
class TaskDataset:
    spec: TaskSpec
    train: tuple[Sample, ...]
    test: tuple[Sample, ...]
    vocab: Vocabulary | None = field(default=None, compare=False, repr=False)

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    def __len__(self) -> int:
        return len(self.train)


def build_vocabulary(specs: Sequence[TaskSpec]) -> Vocabulary:
    content: list[str] = []
    for spec in specs:
        content += spec.content_tokens()
    return Vocabulary([s.task_id for s in specs], content)


def _make_triple(spec: TaskSpec, rng: np.random.Generator):
    alpha = spec.alphabet
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    q = [spec.question_word]
    if spec.kind == "slot_fill":
        picks = rng.choice(len(alpha), size=n, replace=False)
        ctx = [alpha[i] for i in picks]
        pos = int(rng.integers(0, n - 1)) if n > 1 else 0
        key = ctx[pos]
        ans = [ctx[pos + 1] if pos + 1 < n else ctx[0]]
        return ctx, q + [key], ans
    ctx = [alpha[i] for i in rng.integers(0, len(alpha), size=n)]
    if spec.kind == "copy":
        ans = list(ctx)
    elif spec.kind == "reverse":
        ans = ctx[::-1]
    elif spec.kind == "sort":
        order = {a: i for i, a in enumerate(alpha)}
        ans = sorted(ctx, key=order.__getitem__)
    elif spec.kind == "add_mod":
        order = {a: i for i, a in enumerate(alpha)}
        ans = [alpha[sum(order[c] for c in ctx) % len(alpha)]]
    else:  # classify: majority of tokens from the first half of the alphabet
        half = len(alpha) // 2
        low = sum(1 for c in ctx if alpha.index(c) < half)
        ans = [CLASS_LABELS[0] if 2 * low >= n else CLASS_LABELS[1]]
    return ctx, q, ans


def generate_task(spec: TaskSpec, vocab: Vocabulary | None = None) -> TaskDataset:
    """Deterministic dataset for ``spec``; sample ``i`` depends only on (seed, split, i)."""
    if len(spec.alphabet) < 2:
        raise ValueError(f"task {spec.task_id}: alphabet needs at least 2 symbols")
    if spec.kind == "slot_fill" and len(spec.alphabet) < spec.max_len:
        raise ValueError(f"task {spec.task_id}: slot_fill needs {spec.max_len} distinct symbols, "
                         f"alphabet has {len(spec.alphabet)}")
    if spec.kind == "classify" and len(spec.alphabet) < 2:
        raise ValueError(f"task {spec.task_id}: classify needs at least 2 symbols")
    vocab = vocab or build_vocabulary([spec])
    splits = []
    for split, n in ((0, spec.n_train), (1, spec.n_test)):
        samples = []
        for i in range(n):
            rng = np.random.default_rng([spec.seed, split, i])
            ctx, q, ans = _make_triple(spec, rng)
            samples.append(encode_sample(vocab, spec.task_id, ctx, q, ans))
        splits.append(tuple(samples))
    return TaskDataset(spec, splits[0], splits[1], vocab)


def dump_jsonl(vocab: Vocabulary, samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            task_id, ctx, q, ans = decode_sample(vocab, s)
            fh.write(json.dumps({"task_id": task_id, "context": ctx,
                                 "question": q, "answer": ans}) + "\n")


def load_jsonl(vocab: Vocabulary, path: str | Path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            out.append(encode_sample(vocab, d["task_id"], d["context"], d["question"], d["answer"]))
    return out
