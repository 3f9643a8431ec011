"""Semantic token decoder with speaker prompting.

Non-autoregressive de-tokenizer: SSET codes plus a speaker embedding become
continuous frames. The speaker encoder is an LSTM followed by a linear layer
and a rectifier; conditioning is additive after projection. Trains by plain
L2 regression against the target frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .rng import stream
from .sset import SpeechTokenSeq


@dataclass
class TokenDecoderConfig:
    codebook_size: int = 64
    code_dim: int = 24
    upsample_factor: int = 2
    frame_dim: int = 16
    speaker_hidden: int = 24    # LSTM hidden size
    speaker_dim: int = 8        # embedding size after linear + ReLU

    def __post_init__(self):
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")
        if min(self.codebook_size, self.code_dim, self.frame_dim,
               self.speaker_hidden, self.speaker_dim) < 1:
            raise ValueError("all dimensions must be >= 1")


class TokenDecoderModel:
    """Code embeddings -> upsample -> conv smoothing + speaker add -> frames."""

    def __init__(self, cfg: TokenDecoderConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = stream(seed, "token-decoder-init")
        c, d, h, e = cfg.code_dim, cfg.frame_dim, cfg.speaker_hidden, \
            cfg.speaker_dim

        def add(name, *shape, scale=None):
            if scale is None:
                scale = 1.0 / math.sqrt(shape[0])
            self.params[name] = Tensor(rng.normal(scale=scale, size=shape),
                                       requires_grad=True)

        def zeros(name, *shape):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        add("code_emb", cfg.codebook_size, c, scale=0.1)
        add("smooth.w", 3, c, c)
        zeros("smooth.b", c)
        add("spk_proj.w", e, c)
        zeros("spk_proj.b", c)
        add("out.w", c, d)
        zeros("out.b", d)
        # Speaker encoder: one LSTM cell over prompt frames, gates stacked
        # as [i, f, g, o] along the 4h output axis.
        add("spk.lstm.wx", d, 4 * h)
        add("spk.lstm.wh", h, 4 * h)
        zeros("spk.lstm.b", 4 * h)
        add("spk.lin.w", h, e)
        zeros("spk.lin.b", e)

    @classmethod
    def identity(cls, codebook_size: int, dim: int,
                 upsample_factor: int = 1) -> "TokenDecoderModel":
        """Toy weights: output == upsampled code embeddings when the
        speaker embedding is zero."""
        cfg = TokenDecoderConfig(codebook_size=codebook_size, code_dim=dim,
                                 upsample_factor=upsample_factor,
                                 frame_dim=dim, speaker_dim=dim)
        model = cls(cfg)
        model.params["smooth.w"].data = np.zeros((3, dim, dim))
        model.params["smooth.b"].data = np.zeros(dim)
        model.params["out.w"].data = np.eye(dim)
        model.params["out.b"].data = np.zeros(dim)
        model.params["spk_proj.w"].data = np.eye(dim)
        model.params["spk_proj.b"].data = np.zeros(dim)
        return model

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- speaker encoder -------------------------------------------------------

    def encode_speaker_t(self, prompt: np.ndarray) -> Tensor:
        prompt = np.asarray(prompt, dtype=np.float64)
        if prompt.ndim != 2 or prompt.shape[1] != self.cfg.frame_dim:
            raise ValueError("prompt must be (T, frame_dim)")
        if len(prompt) < 1:
            raise ValueError("empty prompt")
        h_size = self.cfg.speaker_hidden
        wx, wh, b = (self.params["spk.lstm.wx"], self.params["spk.lstm.wh"],
                     self.params["spk.lstm.b"])
        h = Tensor(np.zeros((1, h_size)))
        c = Tensor(np.zeros((1, h_size)))
        gates_x = nm.matmul(Tensor(prompt), wx) + b  # (T, 4h)
        for t in range(len(prompt)):
            z = gates_x[t:t + 1] + nm.matmul(h, wh)
            i = nm.sigmoid(z[:, :h_size])
            f = nm.sigmoid(z[:, h_size:2 * h_size])
            g = nm.tanh(z[:, 2 * h_size:3 * h_size])
            o = nm.sigmoid(z[:, 3 * h_size:])
            c = nm.mul(f, c) + nm.mul(i, g)
            h = nm.mul(o, nm.tanh(c))
        lin = nm.matmul(h, self.params["spk.lin.w"]) + self.params["spk.lin.b"]
        return nm.reshape(nm.relu(lin), (self.cfg.speaker_dim,))

    def encode_speaker(self, prompt: np.ndarray) -> np.ndarray:
        """Speaker embedding of the prompt (final LSTM state, linear, ReLU)."""
        return self.encode_speaker_t(prompt).data

    # -- decoder ---------------------------------------------------------------

    def decode_t(self, codes: list[int], spk: Tensor) -> Tensor:
        k = self.cfg.codebook_size
        if not codes:
            raise ValueError("empty code sequence")
        if any(not 0 <= c < k for c in codes):
            raise ValueError("code out of range")
        if spk.shape != (self.cfg.speaker_dim,):
            raise ValueError("speaker embedding dimension mismatch")
        x = nm.gather_rows(self.params["code_emb"], list(codes))
        x = nm.repeat(x, self.cfg.upsample_factor, axis=0)
        cond = nm.matmul(nm.reshape(spk, (1, self.cfg.speaker_dim)),
                         self.params["spk_proj.w"]) + self.params["spk_proj.b"]
        h = nm.conv1d(x, self.params["smooth.w"], self.params["smooth.b"])
        x = x + nm.relu(h + cond)
        return nm.matmul(x, self.params["out.w"]) + self.params["out.b"]

    def decode_to_frames(self, codes, spk: np.ndarray) -> np.ndarray:
        """Frames of length |codes| * upsample_factor."""
        if isinstance(codes, SpeechTokenSeq):
            codes = codes.codes
        spk_t = Tensor(np.asarray(spk, dtype=np.float64))
        return self.decode_t(list(codes), spk_t).data

    # -- persistence -----------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.array(tensors[name], dtype=np.float64)


def decoder_train_step(model: TokenDecoderModel, batch, opt,
                       speakers=None, freeze_speaker: bool = False) -> float:
    """One Adam step of L2 regression.

    batch: list of (codes, prompt_frames, target_frames). `speakers`, when
    given, is a matching list of (prompt_speaker, target_speaker) pairs and
    must agree within each item (the prompt is a different utterance of the
    target's speaker).
    """
    if not batch:
        raise ValueError("empty batch")
    if speakers is not None:
        for ps, ts in speakers:
            if ps != ts:
                raise ValueError(f"speaker mismatch: prompt {ps}, target {ts}")
    model.zero_grad()
    terms = []
    for codes, prompt, target in batch:
        if isinstance(codes, SpeechTokenSeq):
            codes = codes.codes
        spk = model.encode_speaker_t(prompt)
        if freeze_speaker:
            spk = spk.detach()
        decoded = model.decode_t(list(codes), spk)
        target = np.asarray(target, dtype=np.float64)
        n = min(decoded.shape[0], len(target))
        diff = decoded[:n] - Tensor(target[:n])
        terms.append(nm.tmean(nm.mul(diff, diff)))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    loss = loss * (1.0 / len(terms))
    loss.backward()
    nm.adam_update(opt, model.params)
    return loss.item()
