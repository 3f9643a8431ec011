"""Decoder-only multi-modal transformer with task-ID tokens.

Mixed-modality input elements (text tokens, speech tokens, a task-ID token,
continuous frames) are embedded into a shared space, run through a pre-norm
transformer trunk under a prefix-causal mask, and projected to logits by a
per-task output head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .rng import stream


class ElementKind(Enum):
    TEXT_TOKEN = "text"
    SPEECH_TOKEN = "speech"
    TASK_ID = "task"
    CONTINUOUS_FRAME = "frame"


@dataclass
class SequenceElement:
    kind: ElementKind
    value: object  # int, tuple[int, ...], or (D,) ndarray


def text_el(token_id: int) -> SequenceElement:
    return SequenceElement(ElementKind.TEXT_TOKEN, int(token_id))


def speech_el(*token_ids: int) -> SequenceElement:
    return SequenceElement(ElementKind.SPEECH_TOKEN,
                           tuple(int(t) for t in token_ids))


def task_el(task_id: int) -> SequenceElement:
    return SequenceElement(ElementKind.TASK_ID, int(task_id))


def frame_el(vec: np.ndarray) -> SequenceElement:
    return SequenceElement(ElementKind.CONTINUOUS_FRAME,
                           np.asarray(vec, dtype=np.float64))


@dataclass
class LmConfig:
    text_vocab_size: int
    speech_vocab_size: int
    continuous_input_dim: int
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ffn: int = 256
    speech_token_dims: int = 1
    num_task_ids: int = 4
    max_seq_len: int = 128
    # Source-block mask semantics: prefix-LM (bidirectional source) by
    # default; flip for a strictly causal ablation.
    full_causal: bool = False

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.text_vocab_size < 2 or self.speech_vocab_size < 2:
            raise ValueError("vocab sizes must be >= 2")
        if self.speech_token_dims < 1:
            raise ValueError("speech_token_dims must be >= 1")


@dataclass
class LmOutput:
    logits: Tensor   # (L, vocab of the task head)
    hidden: Tensor   # (L, d_model)


def build_attention_mask(boundary: int, total: int,
                         full_causal: bool = False) -> np.ndarray:
    """Prefix-causal mask: source rows see the whole source, target rows
    see the source plus preceding targets."""
    if not (1 <= boundary <= total):
        raise ValueError(f"boundary {boundary} out of range for length {total}")
    mask = np.tril(np.ones((total, total), dtype=bool))
    if not full_causal:
        mask[:boundary, :boundary] = True
    return mask


class MultiModalLm:
    """Transformer trunk + modality embeddings + per-task heads.

    head_vocab maps a task name to its target vocabulary size; every task
    in it gets an independent output head.
    """

    def __init__(self, cfg: LmConfig, head_vocab: dict[str, int],
                 seed: int = 0):
        self.cfg = cfg
        self.head_vocab = dict(head_vocab)
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)

    # -- parameters ----------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def _init_params(self, seed: int) -> None:
        cfg = self.cfg
        rng = stream(seed, "lm-init")
        d = cfg.d_model
        out_scale = 1.0 / math.sqrt(2.0 * cfg.num_layers)

        def normal(*shape, scale=0.02):
            return rng.normal(scale=scale, size=shape)

        self._add("text_emb", normal(cfg.text_vocab_size, d))
        for j in range(cfg.speech_token_dims):
            self._add(f"speech_emb.{j}", normal(cfg.speech_vocab_size, d))
        self._add("task_emb", normal(cfg.num_task_ids, d))
        self._add("pos_emb", normal(cfg.max_seq_len, d))
        self._add("cont_proj.w", normal(cfg.continuous_input_dim, d))
        self._add("cont_proj.b", np.zeros(d))
        for i in range(cfg.num_layers):
            p = f"layer{i}."
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            for nm_ in ("wq", "wk", "wv"):
                self._add(p + "attn." + nm_, normal(d, d))
            self._add(p + "attn.wo", normal(d, d) * out_scale)
            self._add(p + "attn.bo", np.zeros(d))
            self._add(p + "ln2.g", np.ones(d))
            self._add(p + "ln2.b", np.zeros(d))
            self._add(p + "ffn.w1", normal(d, cfg.d_ffn))
            self._add(p + "ffn.b1", np.zeros(cfg.d_ffn))
            self._add(p + "ffn.w2", normal(cfg.d_ffn, d) * out_scale)
            self._add(p + "ffn.b2", np.zeros(d))
        self._add("final_ln.g", np.ones(d))
        self._add("final_ln.b", np.zeros(d))
        for task, vocab in sorted(self.head_vocab.items()):
            self._add(f"head.{task}.w", normal(d, vocab))
            self._add(f"head.{task}.b", np.zeros(vocab))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def trunk_param_names(self) -> list[str]:
        """Parameters shared with a text-only LM of the same shape."""
        names = ["pos_emb", "final_ln.g", "final_ln.b", "text_emb"]
        for i in range(self.cfg.num_layers):
            names.extend(n for n in self.params if n.startswith(f"layer{i}."))
        return names

    # -- forward -------------------------------------------------------------

    def embed_sequence(self, elements: list[SequenceElement]) -> Tensor:
        """(L, d_model) embedding of a mixed-modality sequence, with learned
        positional embeddings added."""
        cfg = self.cfg
        if not elements:
            raise ValueError("empty element sequence")
        L = len(elements)
        if L > cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max {cfg.max_seq_len}")

        text_pos, text_ids = [], []
        speech_pos, speech_ids = [], []
        task_pos, task_ids = [], []
        frame_pos, frame_vecs = [], []
        for i, el in enumerate(elements):
            if el.kind is ElementKind.TEXT_TOKEN:
                if not 0 <= el.value < cfg.text_vocab_size:
                    raise ValueError(f"text token {el.value} out of vocab")
                text_pos.append(i)
                text_ids.append(el.value)
            elif el.kind is ElementKind.SPEECH_TOKEN:
                ids = el.value
                if len(ids) != cfg.speech_token_dims:
                    raise ValueError("speech token dimensionality mismatch")
                if any(not 0 <= t < cfg.speech_vocab_size for t in ids):
                    raise ValueError(f"speech token {ids} out of vocab")
                speech_pos.append(i)
                speech_ids.append(ids)
            elif el.kind is ElementKind.TASK_ID:
                if not 0 <= el.value < cfg.num_task_ids:
                    raise ValueError(f"task id {el.value} out of range")
                task_pos.append(i)
                task_ids.append(el.value)
            else:
                vec = el.value
                if vec.shape != (cfg.continuous_input_dim,):
                    raise ValueError("continuous frame dimension mismatch")
                frame_pos.append(i)
                frame_vecs.append(vec)

        parts = []
        if text_pos:
            rows = nm.gather_rows(self.params["text_emb"], text_ids)
            parts.append(nm.put_rows(rows, text_pos, L))
        if speech_pos:
            ids = np.asarray(speech_ids)  # (n, m)
            acc = None
            for j in range(cfg.speech_token_dims):
                rows = nm.gather_rows(self.params[f"speech_emb.{j}"], ids[:, j])
                acc = rows if acc is None else acc + rows
            rows = acc * (1.0 / cfg.speech_token_dims)
            parts.append(nm.put_rows(rows, speech_pos, L))
        if task_pos:
            rows = nm.gather_rows(self.params["task_emb"], task_ids)
            parts.append(nm.put_rows(rows, task_pos, L))
        if frame_pos:
            rows = nm.matmul(Tensor(np.asarray(frame_vecs)),
                             self.params["cont_proj.w"]) + self.params["cont_proj.b"]
            parts.append(nm.put_rows(rows, frame_pos, L))

        x = parts[0]
        for p in parts[1:]:
            x = x + p
        return x + self.params["pos_emb"][:L]

    def _trunk(self, x: Tensor, mask: np.ndarray) -> Tensor:
        cfg = self.cfg
        H, dh = cfg.num_heads, cfg.d_model // cfg.num_heads
        L = x.shape[0]
        for i in range(cfg.num_layers):
            p = f"layer{i}."
            h = nm.layer_norm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"])

            def heads(w):
                y = nm.matmul(h, self.params[p + "attn." + w])
                return nm.transpose(nm.reshape(y, (L, H, dh)), (1, 0, 2))

            att = nm.attention(heads("wq"), heads("wk"), heads("wv"), mask)
            att = nm.reshape(nm.transpose(att, (1, 0, 2)), (L, cfg.d_model))
            att = nm.matmul(att, self.params[p + "attn.wo"]) + self.params[p + "attn.bo"]
            x = x + att

            h2 = nm.layer_norm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            f = nm.relu(nm.matmul(h2, self.params[p + "ffn.w1"]) + self.params[p + "ffn.b1"])
            f = nm.matmul(f, self.params[p + "ffn.w2"]) + self.params[p + "ffn.b2"]
            x = x + f
        return nm.layer_norm(x, self.params["final_ln.g"], self.params["final_ln.b"])

    def forward(self, elements: list[SequenceElement], task: str,
                boundary: int) -> LmOutput:
        """Logits from the head of `task` at every position.

        boundary is the index of the first target element; positions before
        it form the source + task-ID block of the attention mask.
        """
        if task not in self.head_vocab:
            raise KeyError(f"no head for task {task!r}")
        x = self.embed_sequence(elements)
        mask = build_attention_mask(boundary, len(elements),
                                    self.cfg.full_causal)
        hidden = self._trunk(x, mask)
        logits = nm.matmul(hidden, self.params[f"head.{task}.w"]) \
            + self.params[f"head.{task}.b"]
        return LmOutput(logits=logits, hidden=hidden)

    # -- persistence ----------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if tensors[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            p.data = np.array(tensors[name], dtype=np.float64)


def lm_loss(output: LmOutput, assembled) -> Tensor:
    """Mean cross-entropy over the supervised span.

    Position p predicts the element at p+1 (targets shifted left, ending in
    EOS); supervision starts at the task-ID position and source positions
    contribute nothing.
    """
    targets = np.asarray(assembled.target_ids, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty target span")
    L = output.logits.shape[0]
    positions = np.arange(assembled.boundary - 1, L)
    logp = nm.log_softmax(output.logits, axis=-1)
    picked = nm.take_pairs(logp, positions, targets)
    return nm.tmean(picked) * -1.0
