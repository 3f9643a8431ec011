"""Task registry and LM sequence assembly.

Raw utterances become mixed-modality LM inputs: source elements, the task-ID
token, the target span, and shifted-left supervision targets ending in EOS.
Supervision starts at the task-ID position, which predicts the first target
element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lm import SequenceElement, frame_el, speech_el, task_el, text_el
from .toyworld import ToyUtterance, ToyWorld

ASR = "asr"
TTS = "tts"
LID = "lid"
GID = "gid"

TASK_IDS = {ASR: 0, TTS: 1, LID: 2, GID: 3}
TARGET_MODALITY = {ASR: "text", TTS: "speech", LID: "tag", GID: "tag"}

SOURCE_CONTINUOUS = "continuous"
SOURCE_SSET_TOKENS = "sset_tokens"


@dataclass
class Vocab:
    """Text-side vocabulary: symbols, classification tags, EOS.

    Tags are ordinary text tokens (length-1 target sequences); the speech
    vocabulary reserves its last id for EOS.
    """

    symbols: str
    languages: list[str]
    genders: list[str]
    speech_codebook_size: int

    def __post_init__(self):
        self._text_tokens = (list(self.symbols) + list(self.languages)
                             + list(self.genders) + ["<eos>"])
        self._index = {t: i for i, t in enumerate(self._text_tokens)}

    @classmethod
    def from_world(cls, world: ToyWorld, codebook_size: int) -> "Vocab":
        return cls(symbols=world.symbols, languages=world.languages,
                   genders=["female", "male"],
                   speech_codebook_size=codebook_size)

    @property
    def text_size(self) -> int:
        return len(self._text_tokens)

    @property
    def text_eos(self) -> int:
        return self.text_size - 1

    @property
    def speech_size(self) -> int:
        return self.speech_codebook_size + 1

    @property
    def speech_eos(self) -> int:
        return self.speech_codebook_size

    def text_id(self, token: str) -> int:
        if token not in self._index:
            raise KeyError(f"unknown text token {token!r}")
        return self._index[token]

    def text_token(self, idx: int) -> str:
        return self._text_tokens[idx]

    def encode_text(self, text: str) -> list[int]:
        return [self.text_id(ch) for ch in text]

    def decode_text(self, ids) -> str:
        return "".join(self.text_token(i) for i in ids
                       if i != self.text_eos)

    def tag_ids(self, task: str) -> list[int]:
        tags = self.languages if task == LID else self.genders
        return [self.text_id(t) for t in tags]


@dataclass
class RawExample:
    id: str
    frames: np.ndarray
    text: str
    language: str
    gender: str
    speaker: int
    speech_tokens: list[int] | None = None

    @classmethod
    def from_utterance(cls, utt: ToyUtterance,
                       speech_tokens: list[int] | None = None) -> "RawExample":
        return cls(id=utt.id, frames=utt.frames, text=utt.text,
                   language=utt.language, gender=utt.gender,
                   speaker=utt.speaker, speech_tokens=speech_tokens)


@dataclass
class AssembledExample:
    elements: list[SequenceElement]
    boundary: int               # index of the first target element
    target_ids: np.ndarray      # supervision for positions boundary-1..L-1
    task: str

    def __post_init__(self):
        from .lm import ElementKind
        b, L = self.boundary, len(self.elements)
        if not (1 <= b <= L):
            raise ValueError("boundary out of range")
        if self.elements[b - 1].kind is not ElementKind.TASK_ID:
            raise ValueError("element before the target span must be the task ID")
        if len(self.target_ids) != L - b + 1:
            raise ValueError("target length must cover task-ID through last "
                             "target position")


def _source_elements(ex: RawExample, source: str) -> list[SequenceElement]:
    if source == SOURCE_CONTINUOUS:
        if len(ex.frames) == 0:
            raise ValueError("empty frames")
        return [frame_el(f) for f in ex.frames]
    if source == SOURCE_SSET_TOKENS:
        if not ex.speech_tokens:
            raise ValueError(f"{ex.id}: no speech tokens on example")
        return [speech_el(t) for t in ex.speech_tokens]
    raise ValueError(f"unknown source representation {source!r}")


def assemble_asr(ex: RawExample, vocab: Vocab,
                 source: str = SOURCE_CONTINUOUS) -> AssembledExample:
    """[source..., TASK_ASR, text...]; targets [text..., EOS]."""
    if not ex.text:
        raise ValueError("ASR requires nonempty text")
    src = _source_elements(ex, source)
    text_ids = vocab.encode_text(ex.text)
    elements = src + [task_el(TASK_IDS[ASR])] + [text_el(t) for t in text_ids]
    targets = np.array(text_ids + [vocab.text_eos], dtype=np.int64)
    return AssembledExample(elements, len(src) + 1, targets, ASR)


def assemble_tts_train(ex: RawExample, vocab: Vocab) -> AssembledExample:
    """[text..., TASK_TTS, codes...]; targets [codes..., EOS]."""
    if not ex.text:
        raise ValueError("TTS requires nonempty text")
    if not ex.speech_tokens:
        raise ValueError(f"{ex.id}: TTS requires SSET codes")
    text_ids = vocab.encode_text(ex.text)
    codes = list(ex.speech_tokens)
    elements = ([text_el(t) for t in text_ids] + [task_el(TASK_IDS[TTS])]
                + [speech_el(c) for c in codes])
    targets = np.array(codes + [vocab.speech_eos], dtype=np.int64)
    return AssembledExample(elements, len(text_ids) + 1, targets, TTS)


def assemble_tts_infer_prefix(prompt_text: str, target_text: str,
                              prompt_codes: list[int], vocab: Vocab
                              ) -> tuple[list[SequenceElement], int]:
    """Speaker-prompted TTS prefix: prompt transcript, target text, TTS
    task ID, prompt codes. Returns (elements, boundary); generation
    continues after the prompt codes."""
    if not prompt_text or not target_text or not prompt_codes:
        raise ValueError("prompt text, target text, and prompt codes must "
                         "all be nonempty")
    text_ids = vocab.encode_text(prompt_text) + vocab.encode_text(target_text)
    elements = ([text_el(t) for t in text_ids] + [task_el(TASK_IDS[TTS])]
                + [speech_el(c) for c in prompt_codes])
    return elements, len(text_ids) + 1


def assemble_classification(ex: RawExample, task: str, vocab: Vocab,
                            source: str = SOURCE_CONTINUOUS
                            ) -> AssembledExample:
    """[source..., TASK, tag]; targets [tag, EOS]; the tag is predicted at
    the task-ID position."""
    if task not in (LID, GID):
        raise ValueError(f"not a classification task: {task}")
    tag = ex.language if task == LID else ex.gender
    tag_id = vocab.text_id(tag)
    if tag_id not in vocab.tag_ids(task):
        raise ValueError(f"unknown tag {tag!r}")
    src = _source_elements(ex, source)
    elements = src + [task_el(TASK_IDS[task])] + [text_el(tag_id)]
    targets = np.array([tag_id, vocab.text_eos], dtype=np.int64)
    return AssembledExample(elements, len(src) + 1, targets, task)


def assemble(ex: RawExample, task: str, vocab: Vocab,
             source: str = SOURCE_CONTINUOUS) -> AssembledExample:
    if task == ASR:
        return assemble_asr(ex, vocab, source)
    if task == TTS:
        return assemble_tts_train(ex, vocab)
    return assemble_classification(ex, task, vocab, source)


def disassemble(assembled: AssembledExample, vocab: Vocab) -> dict:
    """Recover the raw fields used by assembly (round-trip check)."""
    from .lm import ElementKind
    out: dict = {"task": assembled.task}
    tgt = [int(t) for t in assembled.target_ids]
    if assembled.task == TTS:
        out["codes"] = tgt[:-1]
        text_ids = [el.value for el in assembled.elements[:assembled.boundary - 1]
                    if el.kind is ElementKind.TEXT_TOKEN]
        out["text"] = vocab.decode_text(text_ids)
    elif assembled.task == ASR:
        out["text"] = vocab.decode_text(tgt[:-1])
    else:
        out["tag"] = vocab.text_token(tgt[0])
    return out
