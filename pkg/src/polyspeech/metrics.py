"""Evaluation metrics: CER, accuracy, macro-F1, speaker cosine similarity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    n: int
    counts: dict = field(default_factory=dict)


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    m, n = len(hyp), len(ref)
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            sub = prev[j - 1] + (hyp[i - 1] != ref[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[n]


def cer(hyp: str, ref: str) -> float:
    """Character error rate: edit distance over reference length."""
    if len(ref) == 0:
        raise ValueError("empty reference")
    return edit_distance(hyp, ref) / len(ref)


def corpus_cer(hyps: Sequence[str], refs: Sequence[str]) -> float:
    """Pooled CER: total edits over total reference length."""
    if len(hyps) != len(refs):
        raise ValueError("hyps/refs length mismatch")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ValueError("empty references")
    edits = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return edits / total_ref


def accuracy(hyps: Sequence, refs: Sequence) -> float:
    if len(hyps) != len(refs):
        raise ValueError("hyps/refs length mismatch")
    if not refs:
        raise ValueError("empty inputs")
    return sum(h == r for h, r in zip(hyps, refs)) / len(refs)


def macro_f1(hyps: Sequence, refs: Sequence, classes: Sequence,
             skip_absent: bool = False) -> float:
    """Unweighted mean of per-class F1.

    A class absent from both refs and hyps contributes 0 unless
    skip_absent is set; a class with precision + recall = 0 scores 0.
    """
    if len(hyps) != len(refs):
        raise ValueError("hyps/refs length mismatch")
    f1s = []
    for c in classes:
        tp = sum(1 for h, r in zip(hyps, refs) if h == c and r == c)
        fp = sum(1 for h, r in zip(hyps, refs) if h == c and r != c)
        fn = sum(1 for h, r in zip(hyps, refs) if h != c and r == c)
        if tp == fp == fn == 0:
            if skip_absent:
                continue
            f1s.append(0.0)
            continue
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    if not f1s:
        raise ValueError("no classes to score")
    return sum(f1s) / len(f1s)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm embedding")
    return float(a @ b / (na * nb))


def secs_toy(synth_frames: np.ndarray, prompt_frames: np.ndarray,
             embed_fn) -> float:
    """Speaker cosine similarity between synthesized frames and the prompt.

    embed_fn maps a (T, D) frame array to a speaker vector; either a trained
    speaker encoder or the toy world's least-squares oracle.
    """
    if len(synth_frames) == 0 or len(prompt_frames) == 0:
        raise ValueError("empty frames")
    return cosine_similarity(embed_fn(synth_frames), embed_fn(prompt_frames))


def write_report_csv(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("task,metric,value,n\n")
        for r in reports:
            f.write(f"{r.task},{r.metric},{r.value:.6f},{r.n}\n")
