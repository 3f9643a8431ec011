"""Autoregressive generation: top-k sampling, beam search, greedy.

Search runs against a generic scoring callable `logprob_fn(ids) -> log-prob
vector over the next token`, so the same machinery serves the real LM and
small enumerable oracle models in tests. `lm_step_fn` adapts a MultiModalLm
to that interface by full recomputation each step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lm import ElementKind, MultiModalLm, SequenceElement, speech_el, text_el
from .numerics import softmax_vector
from .tasks import TARGET_MODALITY

TOP_K = "top_k"
BEAM = "beam"
GREEDY = "greedy"


@dataclass
class DecodeConfig:
    mode: str = TOP_K
    k: int = 5
    beam_size: int = 5
    max_len: int = 32
    temperature: float = 1.0
    length_normalize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.beam_size < 1 or self.max_len < 1:
            raise ValueError("k, beam_size, and max_len must be >= 1")


@dataclass
class Hypothesis:
    ids: tuple[int, ...]
    logprob: float
    finished: bool

    def score(self, length_normalize: bool) -> float:
        if length_normalize:
            return self.logprob / max(1, len(self.ids) + int(self.finished))
        return self.logprob


def top_k_sample(logits: np.ndarray, k: int, rng: np.random.Generator,
                 temperature: float = 1.0) -> int:
    """Sample among the k highest logits, softmax-renormalized."""
    logits = np.asarray(logits, dtype=np.float64)
    if k > logits.size:
        raise ValueError(f"k={k} exceeds vocabulary size {logits.size}")
    # Deterministic top-k set: ties broken toward the lower id.
    order = np.lexsort((np.arange(logits.size), -logits))
    top = order[:k]
    probs = softmax_vector(logits[top] / temperature)
    return int(top[rng.choice(k, p=probs)])


def beam_search(logprob_fn, eos_id: int, cfg: DecodeConfig) -> Hypothesis:
    """Length-unnormalized beam search with frozen finished hypotheses.

    Returns the best finished hypothesis, or the best partial one
    (finished=False flags truncation) if nothing finishes within max_len.
    """
    beams = [Hypothesis((), 0.0, False)]
    for _ in range(cfg.max_len):
        candidates = [h for h in beams if h.finished]
        for h in beams:
            if h.finished:
                continue
            logp = np.asarray(logprob_fn(h.ids), dtype=np.float64)
            order = np.lexsort((np.arange(logp.size), -logp))
            for tok in order[:cfg.beam_size]:
                tok = int(tok)
                if tok == eos_id:
                    candidates.append(Hypothesis(h.ids, h.logprob + logp[tok],
                                                 True))
                else:
                    candidates.append(Hypothesis(h.ids + (tok,),
                                                 h.logprob + logp[tok], False))
        candidates.sort(key=lambda h: (-h.score(cfg.length_normalize),
                                       not h.finished, h.ids))
        beams = candidates[:cfg.beam_size]
        if all(h.finished for h in beams):
            break
    finished = [h for h in beams if h.finished]
    pool = finished if finished else beams
    return max(pool, key=lambda h: (h.score(cfg.length_normalize),
                                    tuple(-i for i in h.ids)))


def greedy_decode(logprob_fn, eos_id: int, cfg: DecodeConfig) -> Hypothesis:
    ids: tuple[int, ...] = ()
    total = 0.0
    for _ in range(cfg.max_len):
        logp = np.asarray(logprob_fn(ids), dtype=np.float64)
        tok = int(logp.argmax())
        total += logp[tok]
        if tok == eos_id:
            return Hypothesis(ids, total, True)
        ids = ids + (tok,)
    return Hypothesis(ids, total, False)


def generate(logprob_fn, eos_id: int, cfg: DecodeConfig,
             rng: np.random.Generator | None = None
             ) -> tuple[list[int], bool]:
    """Decode until EOS or max_len. Returns (ids without EOS, truncated)."""
    if cfg.mode == BEAM:
        hyp = beam_search(logprob_fn, eos_id, cfg)
        return list(hyp.ids), not hyp.finished
    if cfg.mode == GREEDY:
        hyp = greedy_decode(logprob_fn, eos_id, cfg)
        return list(hyp.ids), not hyp.finished
    if cfg.mode != TOP_K:
        raise ValueError(f"unknown decode mode {cfg.mode!r}")
    if rng is None:
        raise ValueError("top-k sampling needs an rng")
    ids: list[int] = []
    for _ in range(cfg.max_len):
        logp = np.asarray(logprob_fn(tuple(ids)), dtype=np.float64)
        tok = top_k_sample(logp, cfg.k, rng, cfg.temperature)
        if tok == eos_id:
            return ids, False  # EOS excluded from output
        ids.append(tok)
    return ids, True


def lm_step_fn(model: MultiModalLm, prefix: list[SequenceElement],
               boundary: int, task: str):
    """Next-token log-prob callable over generated continuations.

    Generated ids extend the prefix as elements of the task's target
    modality; each call recomputes the full forward pass.
    """
    modality = TARGET_MODALITY[task]

    def to_element(tok: int) -> SequenceElement:
        return speech_el(tok) if modality == "speech" else text_el(tok)

    def logprob_fn(ids) -> np.ndarray:
        elements = prefix + [to_element(t) for t in ids]
        out = model.forward(elements, task, boundary)
        logits = out.logits.data[-1]
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())

    return logprob_fn


def classify(model: MultiModalLm, prefix: list[SequenceElement],
             boundary: int, task: str, allowed_ids: list[int],
             constrained: bool = True) -> int:
    """Classification inference: argmax of the first generated token,
    constrained to the valid tag set by default."""
    logp = lm_step_fn(model, prefix, boundary, task)(())
    if not constrained:
        return int(logp.argmax())
    allowed = np.asarray(allowed_ids)
    return int(allowed[logp[allowed].argmax()])
