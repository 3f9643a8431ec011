"""Semantic speech embedding tokenization (SSET).

A small convolutional encoder-decoder over frame sequences with a residual
vector quantizer. Trains by L2 reconstruction with straight-through
gradients and a commitment term; codebooks follow exponential moving
averages of their assigned residuals. First-layer RVQ indices are the
discrete speech tokens exported to the LM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import AdamState, Tensor, adam_update
from .rng import stream


@dataclass
class SsetConfig:
    frame_dim: int = 16
    latent_dim: int = 8
    downsample_factor: int = 2
    codebook_size: int = 64
    num_rvq_layers: int = 4
    commitment_weight: float = 0.25
    hidden_channels: int = 32
    ema_decay: float = 0.99
    dead_code_steps: int = 100
    activation: str = "relu"  # relu | tanh | linear

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.num_rvq_layers < 1:
            raise ValueError("num_rvq_layers must be >= 1")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")


@dataclass
class SpeechTokenSeq:
    codes: list[int]
    frame_count: int
    downsample_factor: int

    def __post_init__(self):
        expect = -(-self.frame_count // self.downsample_factor)
        if len(self.codes) != expect:
            raise ValueError("token count must be ceil(frames / factor)")


def _split_stride(s: int) -> tuple[int, int]:
    """Split the total downsample factor across the two conv stages."""
    if s == 1:
        return 1, 1
    if s % 2 == 0:
        return 2, s // 2
    return s, 1


class SsetModel:
    def __init__(self, cfg: SsetConfig, seed: int = 0):
        self.cfg = cfg
        self.s1, self.s2 = _split_stride(cfg.downsample_factor)
        self.params: dict[str, Tensor] = {}
        rng = stream(seed, "sset-init")
        d, h, z = cfg.frame_dim, cfg.hidden_channels, cfg.latent_dim

        def conv_param(k, cin, cout):
            scale = 1.0 / math.sqrt(k * cin)
            return Tensor(rng.normal(scale=scale, size=(k, cin, cout)),
                          requires_grad=True)

        self.params["enc1.w"] = conv_param(3, d, h)
        self.params["enc1.b"] = Tensor(np.zeros(h), requires_grad=True)
        self.params["enc2.w"] = conv_param(3, h, z)
        self.params["enc2.b"] = Tensor(np.zeros(z), requires_grad=True)
        self.params["dec1.w"] = conv_param(3, z, h)
        self.params["dec1.b"] = Tensor(np.zeros(h), requires_grad=True)
        self.params["dec2.w"] = conv_param(3, h, d)
        self.params["dec2.b"] = Tensor(np.zeros(d), requires_grad=True)

        # Code 0 of every layer is pinned to the zero vector (a skip code),
        # which makes residual norms non-increasing for all inputs.
        q, k = cfg.num_rvq_layers, cfg.codebook_size
        self.codebooks = np.zeros((q, k, z))
        self.ema_counts = np.ones((q, k))
        self.ema_sums = np.zeros((q, k, z))
        self.unused_steps = np.zeros((q, k), dtype=np.int64)
        self.usage_counts = np.zeros((q, k), dtype=np.int64)
        self.train_steps = 0
        self.initialized = False
        self._seed = seed

    @classmethod
    def identity(cls, frame_dim: int, codebook_size: int = 64) -> "SsetModel":
        """Pass-through codec: latent == frame, no downsampling."""
        cfg = SsetConfig(frame_dim=frame_dim, latent_dim=frame_dim,
                         downsample_factor=1, hidden_channels=frame_dim,
                         codebook_size=codebook_size,
                         num_rvq_layers=1, activation="linear")
        model = cls(cfg)
        eye = np.zeros((3, frame_dim, frame_dim))
        eye[1] = np.eye(frame_dim)
        for name in ("enc1.w", "enc2.w", "dec1.w", "dec2.w"):
            model.params[name].data = eye.copy()
        for name in ("enc1.b", "enc2.b", "dec1.b", "dec2.b"):
            model.params[name].data = np.zeros(frame_dim)
        return model

    def set_codebooks(self, codebooks: np.ndarray) -> None:
        codebooks = np.asarray(codebooks, dtype=np.float64)
        if codebooks.shape != self.codebooks.shape:
            raise ValueError("codebook shape mismatch")
        self.codebooks = codebooks.copy()
        self.ema_sums = codebooks.copy()
        self.ema_counts = np.ones(codebooks.shape[:2])
        self.initialized = True

    # -- network halves --------------------------------------------------------

    def _act(self, x: Tensor) -> Tensor:
        a = self.cfg.activation
        if a == "relu":
            return nm.relu(x)
        if a == "tanh":
            return nm.tanh(x)
        if a == "linear":
            return x
        raise ValueError(f"unknown activation {a!r}")

    def encode_t(self, frames: np.ndarray) -> Tensor:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.frame_dim:
            raise ValueError("frames must be (T, frame_dim)")
        if frames.shape[0] < 1:
            raise ValueError("empty frame sequence")
        x = Tensor(frames)
        h = self._act(nm.conv1d(x, self.params["enc1.w"],
                                self.params["enc1.b"], stride=self.s1))
        return nm.conv1d(h, self.params["enc2.w"], self.params["enc2.b"],
                         stride=self.s2)

    def decode_t(self, latents: Tensor) -> Tensor:
        h = nm.zero_stuff(latents, self.s2)
        h = self._act(nm.conv1d(h, self.params["dec1.w"],
                                self.params["dec1.b"], stride=1))
        h = nm.zero_stuff(h, self.s1)
        return nm.conv1d(h, self.params["dec2.w"], self.params["dec2.b"],
                         stride=1)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """Latent sequence of length ceil(T / downsample_factor)."""
        return self.encode_t(frames).data

    # -- quantizer --------------------------------------------------------------

    def quantize_sequence(self, latents: np.ndarray
                          ) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """All-layer RVQ of (T, latent) rows.

        Returns (codes (T, Q), quantized (T, latent), per-layer residual
        inputs used for EMA updates)."""
        residual = np.array(latents, dtype=np.float64)
        quantized = np.zeros_like(residual)
        codes = np.zeros((len(residual), self.cfg.num_rvq_layers),
                         dtype=np.int64)
        residual_inputs = []
        for q in range(self.cfg.num_rvq_layers):
            cb = self.codebooks[q]
            residual_inputs.append(residual.copy())
            d2 = ((residual[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
            idx = d2.argmin(axis=1)
            codes[:, q] = idx
            quantized += cb[idx]
            residual = residual - cb[idx]
        return codes, quantized, residual_inputs

    def tokenize(self, frames: np.ndarray) -> SpeechTokenSeq:
        """First-layer RVQ codes of the encoded latents."""
        if not self.initialized:
            raise RuntimeError("codec codebooks not initialized; train or "
                               "call init_codebooks first")
        latents = self.encode(frames)
        codes, _, _ = self.quantize_sequence(latents)
        return SpeechTokenSeq(codes=[int(c) for c in codes[:, 0]],
                              frame_count=len(frames),
                              downsample_factor=self.cfg.downsample_factor)

    def decode(self, codes_or_latents) -> np.ndarray:
        """Frames from token codes (layer-1 vectors) or latent rows."""
        if isinstance(codes_or_latents, SpeechTokenSeq):
            codes = codes_or_latents.codes
        elif isinstance(codes_or_latents, (list, tuple)) or (
                isinstance(codes_or_latents, np.ndarray)
                and codes_or_latents.ndim == 1
                and np.issubdtype(codes_or_latents.dtype, np.integer)):
            codes = list(codes_or_latents)
        else:
            latents = np.asarray(codes_or_latents, dtype=np.float64)
            return self.decode_t(Tensor(latents)).data
        k = self.cfg.codebook_size
        if any(not 0 <= c < k for c in codes):
            raise ValueError("speech token code out of range")
        latents = self.codebooks[0][np.asarray(codes, dtype=np.int64)]
        return self.decode_t(Tensor(latents)).data

    # -- training ----------------------------------------------------------------

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def rvq_quantize(latent: np.ndarray, codebooks: np.ndarray
                 ) -> tuple[list[int], np.ndarray, list[float]]:
    """Residual quantization of one latent vector.

    Returns (codes per layer, quantized sum, residual norms r0..rQ).
    quantized + final residual reconstructs the input exactly.
    """
    codebooks = np.asarray(codebooks, dtype=np.float64)
    if codebooks.size == 0 or not np.all(np.isfinite(codebooks)):
        raise ValueError("codebooks must be nonempty and finite")
    residual = np.array(latent, dtype=np.float64)
    quantized = np.zeros_like(residual)
    codes: list[int] = []
    norms = [float(np.linalg.norm(residual))]
    for cb in codebooks:
        d2 = ((cb - residual) ** 2).sum(-1)
        idx = int(d2.argmin())
        codes.append(idx)
        quantized = quantized + cb[idx]
        residual = residual - cb[idx]
        norms.append(float(np.linalg.norm(residual)))
    return codes, quantized, norms


def init_codebooks(model: SsetModel, sample_batch: list[np.ndarray],
                   seed: int = 0, lloyd_iters: int = 4) -> SsetModel:
    """Seed codebooks from encoded latents: k-means++ on layer 1, then each
    deeper layer on the residuals left by the previous ones. Code 0 stays
    the zero skip code."""
    latents = np.concatenate([model.encode(f) for f in sample_batch], axis=0)
    k = model.cfg.codebook_size
    if len(latents) < k:
        raise ValueError(f"need at least {k} latents to seed codebooks, "
                         f"got {len(latents)}")
    residual = latents
    books = []
    for q in range(model.cfg.num_rvq_layers):
        rng = stream(seed, "init-codebooks", q)
        centers = _kmeans(residual, k - 1, rng, lloyd_iters)
        cb = np.vstack([np.zeros((1, latents.shape[1])), centers])
        books.append(cb)
        d2 = ((residual[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
        residual = residual - cb[d2.argmin(axis=1)]
    model.set_codebooks(np.stack(books))
    return model


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
            iters: int) -> np.ndarray:
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(len(points)))]
    d2 = ((points - centers[0]) ** 2).sum(-1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = points[int(rng.integers(len(points)))]
        else:
            centers[i] = points[int(rng.choice(len(points), p=d2 / total))]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(-1))
    for _ in range(iters):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = dist.argmin(axis=1)
        for i in range(k):
            sel = points[assign == i]
            if len(sel):
                centers[i] = sel.mean(axis=0)
    return centers


def sset_train_step(model: SsetModel, batch: list[np.ndarray],
                    opt: AdamState) -> tuple[float, float]:
    """One optimization step: straight-through L2 reconstruction plus
    commitment loss; EMA codebook update; dead-code reseeding."""
    if not batch:
        raise ValueError("empty batch")
    if not model.initialized:
        raise RuntimeError("initialize codebooks before training")
    cfg = model.cfg
    model.zero_grad()

    recon_terms = []
    commit_terms = []
    assignments: list[tuple[np.ndarray, list[np.ndarray]]] = []
    all_latents = []
    for frames in batch:
        latent_t = model.encode_t(frames)
        codes, quantized, residual_inputs = \
            model.quantize_sequence(latent_t.data)
        assignments.append((codes, residual_inputs))
        all_latents.append(latent_t.data)
        # Straight-through: decoder sees the quantized values, encoder
        # receives the reconstruction gradient unchanged.
        st = latent_t + Tensor(quantized - latent_t.data)
        recon = model.decode_t(st)[:len(frames)]
        diff = recon - Tensor(np.asarray(frames, dtype=np.float64))
        recon_terms.append(nm.tmean(nm.mul(diff, diff)))
        cdiff = latent_t - Tensor(quantized)
        commit_terms.append(nm.tmean(nm.mul(cdiff, cdiff)))

    recon_loss = _mean_terms(recon_terms)
    commit_loss = _mean_terms(commit_terms)
    total = recon_loss + commit_loss * cfg.commitment_weight
    total.backward()
    adam_update(opt, model.params)

    _ema_update(model, assignments, np.concatenate(all_latents, axis=0))
    model.train_steps += 1
    return recon_loss.item(), commit_loss.item()


def _mean_terms(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def _ema_update(model: SsetModel, assignments, batch_latents: np.ndarray
                ) -> None:
    cfg = model.cfg
    d = cfg.ema_decay
    for q in range(cfg.num_rvq_layers):
        counts = np.zeros(cfg.codebook_size)
        sums = np.zeros((cfg.codebook_size, cfg.latent_dim))
        for codes, residual_inputs in assignments:
            np.add.at(counts, codes[:, q], 1.0)
            np.add.at(sums, codes[:, q], residual_inputs[q])
        model.ema_counts[q] = d * model.ema_counts[q] + (1 - d) * counts
        model.ema_sums[q] = d * model.ema_sums[q] + (1 - d) * sums
        active = model.ema_counts[q] > 1e-9
        active[0] = False  # skip code stays pinned at zero
        model.codebooks[q][active] = (model.ema_sums[q][active]
                                      / model.ema_counts[q][active, None])
        used = counts > 0
        model.usage_counts[q] += used
        model.unused_steps[q][used] = 0
        model.unused_steps[q][~used] += 1
        dead = model.unused_steps[q] >= cfg.dead_code_steps
        dead[0] = False
        if dead.any():
            rng = stream(model._seed, "dead-code", model.train_steps, q)
            picks = rng.integers(len(batch_latents), size=int(dead.sum()))
            model.codebooks[q][dead] = batch_latents[picks]
            model.ema_sums[q][dead] = batch_latents[picks]
            model.ema_counts[q][dead] = 1.0
            model.unused_steps[q][dead] = 0


# -- persistence ----------------------------------------------------------------


def sset_state_tensors(model: SsetModel) -> dict[str, np.ndarray]:
    out = {name: p.data.copy() for name, p in model.params.items()}
    out["codebooks"] = model.codebooks.copy()
    out["ema_counts"] = model.ema_counts.copy()
    out["ema_sums"] = model.ema_sums.copy()
    out["unused_steps"] = model.unused_steps.astype(np.float64)
    out["usage_counts"] = model.usage_counts.astype(np.float64)
    out["train_steps"] = np.array([float(model.train_steps)])
    out["initialized"] = np.array([1.0 if model.initialized else 0.0])
    return out


def sset_load_state(model: SsetModel, tensors: dict[str, np.ndarray]) -> None:
    for name, p in model.params.items():
        p.data = np.array(tensors[name], dtype=np.float64)
    model.codebooks = np.array(tensors["codebooks"])
    model.ema_counts = np.array(tensors["ema_counts"])
    model.ema_sums = np.array(tensors["ema_sums"])
    model.unused_steps = np.array(tensors["unused_steps"], dtype=np.int64)
    model.usage_counts = np.array(tensors["usage_counts"], dtype=np.int64)
    model.train_steps = int(tensors["train_steps"][0])
    model.initialized = bool(tensors["initialized"][0])
