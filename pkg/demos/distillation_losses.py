"""The four training losses on one sample, and the identities that tie them together.

A teacher is trained (about a CPU-minute) on the reverse task; the student is a fresh model.
For a one-hot teacher at temperature 1, Word-KD collapses to NLL, and Seq-KD
on a decode that equals the gold answer is NLL again.
"""

import numpy as np

from lllab import autodiff as ad
from lllab.distill import (TeacherHandle, nll_loss, seq_kd_loss, seq_kd_soft_loss,
                           teacher_decode_answer, word_kd_loss)
from lllab.lifelong import train_teacher
from lllab.model import LanguageModel, LogitTableModel
from lllab.presets import desk_config, desk_tasks


def one_hot_teacher(sample, vocab_size):
    """Always puts all mass on the sample's own next token."""
    def fn(prefix):
        row = np.full(vocab_size, -np.inf)
        t = len(prefix)
        row[sample.encoded[t] if t < sample.T else 1] = 0.0
        return row
    return LogitTableModel(vocab_size, fn, context_len=32)


def main():
    tasks = desk_tasks()
    reverse = tasks[0]
    V = len(reverse.vocab)
    cfg = desk_config()
    teacher, score = train_teacher(reverse, cfg)
    student = LanguageModel(cfg.model_config(V), seed=7)
    sample = reverse.test[0]
    a1 = sample.a1
    print("sample:", reverse.vocab.decode(sample.encoded))
    print(f"teacher test exact match: {score:.1f}")

    xhat = teacher_decode_answer(TeacherHandle(teacher), sample)
    print("teacher decode:", reverse.vocab.decode(xhat.answer), "(truncated)" if xhat.truncated else "")

    print("\nlosses of an untrained student, answer positions only:")
    print(f"  NLL           {nll_loss(student, sample, a1).item():8.4f}")
    print(f"  Word-KD  t=2  {word_kd_loss(student, teacher, sample, a1, 2.0).item():8.4f}")
    if not xhat.truncated:
        print(f"  Seq-KD        {seq_kd_loss(student, xhat, a1).item():8.4f}")
        print(f"  Seq-KD_soft   {seq_kd_soft_loss(student, teacher, xhat, a1, 2.0).item():8.4f}")

    print("\nidentities (differences should be ~0):")
    oh = one_hot_teacher(sample, V)
    for t0 in (0, a1):
        d = word_kd_loss(student, oh, sample, t0, 1.0).item() - nll_loss(student, sample, t0).item()
        print(f"  one-hot Word-KD - NLL, t0={t0}: {d:.2e}")
    d = seq_kd_loss(student, sample, a1).item() - nll_loss(student, sample, a1).item()
    print(f"  Seq-KD on gold - NLL:          {d:.2e}")
    same = student.copy()
    grads = ad.grad_of(lambda: word_kd_loss(same, student, sample, 0), same.parameters())
    print(f"  self-distillation: largest student gradient {max(np.abs(g).max() for g in grads):.2e}")


if __name__ == "__main__":
    main()
