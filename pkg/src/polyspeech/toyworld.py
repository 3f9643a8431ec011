"""Deterministic synthetic "toy speech" world.

Symbol strings render to continuous embedding frames with additive speaker,
gender, and noise components. Languages differ by symbol inventory and
bigram statistics, gender lives on a dedicated direction orthogonal to the
symbol subspace, so ASR, TTS, LID, and GID are all learnable by
construction and exactly decodable at zero noise.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

_SYMBOL_CHARS = ("abcdefghijklmnopqrstuvwxyz"
                 "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789")

GENDERS = ("female", "male")

FRAMES_MAGIC = b"PSFR"
FRAMES_VERSION = 1


@dataclass
class ToyWorldConfig:
    num_languages: int = 5
    symbols_per_language: int = 3
    shared_symbol_fraction: float = 0.34
    num_speakers: int = 20
    frame_dim: int = 16
    frames_per_symbol: int = 2
    speaker_scale: float = 0.6
    gender_offset: float = 0.5
    noise_sigma: float = 0.0
    # When set, noise_sigma is resolved to this fraction of the minimum
    # symbol separation once the bases are drawn.
    noise_sigma_rel: float | None = None
    base_scale: float = 1.0
    text_len_min: int = 3
    text_len_max: int = 8
    seed: int = 0


@dataclass
class ToyUtterance:
    id: str
    language: str
    gender: str
    speaker: int
    text: str
    frames: np.ndarray  # (T, D) float64


@dataclass
class ToyWorld:
    cfg: ToyWorldConfig
    symbols: str                      # one char per distinct symbol
    bases: np.ndarray                 # (num_symbols, D) base embeddings
    language_symbols: dict[str, str]  # language tag -> its inventory chars
    speaker_vectors: np.ndarray       # (num_speakers, D)
    speaker_language: list[str]
    speaker_gender: list[str]
    gender_direction: np.ndarray      # unit vector, orthogonal to bases
    bigram_init: dict[str, np.ndarray]
    bigram_trans: dict[str, np.ndarray]

    @property
    def languages(self) -> list[str]:
        return sorted(self.language_symbols)

    def symbol_index(self, ch: str) -> int:
        i = self.symbols.find(ch)
        if i < 0:
            raise KeyError(f"unknown symbol {ch!r}")
        return i

    def min_separation(self) -> float:
        diff = self.bases[:, None, :] - self.bases[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        n = len(self.bases)
        return float(dist[~np.eye(n, dtype=bool)].min())

    def gender_sign(self, gender: str) -> float:
        if gender == "male":
            return 1.0
        if gender == "female":
            return -1.0
        raise KeyError(f"unknown gender {gender!r}")


def build_world(cfg: ToyWorldConfig, max_retries: int = 64) -> ToyWorld:
    """Draw all world parameters deterministically from cfg.seed."""
    d = cfg.frame_dim
    n_shared = int(round(cfg.shared_symbol_fraction * cfg.symbols_per_language))
    n_unique = cfg.symbols_per_language - n_shared
    num_symbols = n_shared + cfg.num_languages * n_unique
    if num_symbols > len(_SYMBOL_CHARS):
        raise ValueError("too many symbols for the character pool")
    if num_symbols >= d:
        raise ValueError("frame_dim must exceed the symbol count so the "
                         "gender direction can be orthogonalized")

    g_rng = stream(cfg.seed, "gender-direction")
    gender_direction = g_rng.normal(size=d)
    gender_direction /= np.linalg.norm(gender_direction)

    # Symbol bases live in the orthocomplement of the gender direction and
    # must satisfy the separation invariant: min pairwise distance > 4 sigma
    # sqrt(D).
    cfg = dataclasses.replace(cfg)
    s_rng = stream(cfg.seed, "symbol-bases")
    bases = None
    for _ in range(max_retries):
        cand = s_rng.normal(scale=cfg.base_scale, size=(num_symbols, d))
        cand -= np.outer(cand @ gender_direction, gender_direction)
        diff = cand[:, None, :] - cand[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        min_sep = dist.min()
        sigma = cfg.noise_sigma
        if cfg.noise_sigma_rel is not None:
            sigma = cfg.noise_sigma_rel * min_sep
        if min_sep > 4.0 * sigma * np.sqrt(d):
            bases = cand
            cfg.noise_sigma = sigma
            break
    if bases is None:
        raise RuntimeError("could not satisfy symbol separation; "
                           "config too crowded")

    symbols = _SYMBOL_CHARS[:num_symbols]
    languages = [f"lang{i}" for i in range(cfg.num_languages)]
    shared = symbols[:n_shared]
    language_symbols = {}
    for i, lang in enumerate(languages):
        own = symbols[n_shared + i * n_unique: n_shared + (i + 1) * n_unique]
        language_symbols[lang] = shared + own

    sp_rng = stream(cfg.seed, "speakers")
    vecs = sp_rng.normal(size=(cfg.num_speakers, d))
    vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True) * cfg.speaker_scale
    speaker_language = [languages[i % cfg.num_languages]
                        for i in range(cfg.num_speakers)]
    speaker_gender = [GENDERS[(i // cfg.num_languages) % 2]
                      for i in range(cfg.num_speakers)]

    b_rng = stream(cfg.seed, "bigrams")
    bigram_init, bigram_trans = {}, {}
    for lang in languages:
        k = len(language_symbols[lang])
        init = b_rng.gamma(2.0, size=k)
        trans = b_rng.gamma(2.0, size=(k, k))
        bigram_init[lang] = init / init.sum()
        bigram_trans[lang] = trans / trans.sum(axis=1, keepdims=True)

    return ToyWorld(cfg=cfg, symbols=symbols, bases=bases,
                    language_symbols=language_symbols,
                    speaker_vectors=vecs, speaker_language=speaker_language,
                    speaker_gender=speaker_gender,
                    gender_direction=gender_direction,
                    bigram_init=bigram_init, bigram_trans=bigram_trans)


def sample_text(world: ToyWorld, language: str, length: int,
                rng: np.random.Generator) -> str:
    inv = world.language_symbols[language]
    idx = rng.choice(len(inv), p=world.bigram_init[language])
    out = [inv[idx]]
    for _ in range(length - 1):
        idx = rng.choice(len(inv), p=world.bigram_trans[language][idx])
        out.append(inv[idx])
    return "".join(out)


def render_utterance(world: ToyWorld, text: str, speaker: int, gender: str,
                     sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Render text to (r * len(text), D) frames for the given speaker."""
    cfg = world.cfg
    lang = world.speaker_language[speaker]
    inv = world.language_symbols[lang]
    for ch in text:
        if ch not in inv:
            raise KeyError(f"symbol {ch!r} not in {lang}'s inventory")
    spk = world.speaker_vectors[speaker]
    gterm = cfg.gender_offset * world.gender_sign(gender) * world.gender_direction
    rows = []
    for ch in text:
        base = world.bases[world.symbol_index(ch)]
        clean = base + spk + gterm
        for _ in range(cfg.frames_per_symbol):
            noise = rng.normal(scale=sigma, size=cfg.frame_dim) if sigma > 0 \
                else 0.0
            rows.append(clean + noise)
    return np.asarray(rows, dtype=np.float64)


def make_utterance(world: ToyWorld, utt_id: str, speaker: int,
                   sigma: float | None = None) -> ToyUtterance:
    """Deterministically draw text and frames for one utterance id."""
    cfg = world.cfg
    if sigma is None:
        sigma = cfg.noise_sigma
    rng = stream(cfg.seed, "utterance", utt_id)
    lang = world.speaker_language[speaker]
    gender = world.speaker_gender[speaker]
    length = int(rng.integers(cfg.text_len_min, cfg.text_len_max + 1))
    text = sample_text(world, lang, length, rng)
    frames = render_utterance(world, text, speaker, gender, sigma, rng)
    return ToyUtterance(id=utt_id, language=lang, gender=gender,
                        speaker=speaker, text=text, frames=frames)


def _speaker_pools(world: ToyWorld, held_out_speakers: bool
                   ) -> dict[str, list[int]]:
    """Per-split speaker pools; test speakers held out when requested."""
    all_speakers = list(range(world.cfg.num_speakers))
    if not held_out_speakers:
        return {"train": all_speakers, "val": all_speakers,
                "test": all_speakers}
    # Hold out one speaker per (language, gender) cell where possible.
    held: list[int] = []
    seen: set[tuple[str, str]] = set()
    for s in reversed(all_speakers):
        cell = (world.speaker_language[s], world.speaker_gender[s])
        if cell not in seen:
            seen.add(cell)
            held.append(s)
    rest = [s for s in all_speakers if s not in held]
    if not rest:
        raise ValueError("not enough speakers to hold any out")
    return {"train": rest, "val": rest, "test": sorted(held)}


def generate_split(world: ToyWorld, split: str, n: int,
                   held_out_speakers: bool = False,
                   balance_languages: bool = False) -> list[ToyUtterance]:
    """n utterances for a named split, deterministic given the world seed."""
    pools = _speaker_pools(world, held_out_speakers)[split]
    rng = stream(world.cfg.seed, "split", split)
    langs = world.languages
    utts = []
    for i in range(n):
        if balance_languages:
            lang = langs[i % len(langs)]
            cands = [s for s in pools if world.speaker_language[s] == lang]
            if not cands:
                raise ValueError(f"no {split} speakers for {lang}")
            speaker = cands[int(rng.integers(len(cands)))]
        else:
            speaker = pools[int(rng.integers(len(pools)))]
        utts.append(make_utterance(world, f"{split}-{i:06d}", speaker))
    return utts


def estimate_speaker_vector(frames: np.ndarray, world: ToyWorld,
                            iters: int = 4) -> np.ndarray:
    """Least-squares estimate of the speaker+gender component of frames.

    Alternates nearest-base assignment with mean-residual estimation; exact
    at sigma = 0 once assignments are correct.
    """
    frames = np.asarray(frames, dtype=np.float64)
    est = np.zeros(world.cfg.frame_dim)
    for _ in range(iters):
        resid = frames - est
        d2 = ((resid[:, None, :] - world.bases[None, :, :]) ** 2).sum(-1)
        nearest = d2.argmin(axis=1)
        est = (frames - world.bases[nearest]).mean(axis=0)
    return est


def oracle_decode_text(world: ToyWorld, frames: np.ndarray,
                       frames_per_symbol: int | None = None) -> str:
    """Nearest-base transcription of frames (the world's ideal recognizer)."""
    frames = np.asarray(frames, dtype=np.float64)
    r = frames_per_symbol or world.cfg.frames_per_symbol
    if len(frames) == 0:
        return ""
    est = estimate_speaker_vector(frames, world)
    out = []
    for start in range(0, len(frames), r):
        group = frames[start:start + r].mean(axis=0) - est
        d2 = ((world.bases - group) ** 2).sum(-1)
        out.append(world.symbols[int(d2.argmin())])
    return "".join(out)


# -- on-disk corpus ------------------------------------------------------------


def write_frames(path: Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(FRAMES_MAGIC)
        f.write(struct.pack("<III", FRAMES_VERSION, t, d))
        f.write(frames.astype("<f4").tobytes())


def read_frames(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FRAMES_MAGIC:
            raise ValueError(f"{path}: bad frames magic {magic!r}")
        version, t, d = struct.unpack("<III", f.read(12))
        if version != FRAMES_VERSION:
            raise ValueError(f"{path}: unsupported frames version {version}")
        data = np.frombuffer(f.read(4 * t * d), dtype="<f4")
    return data.reshape(t, d).astype(np.float64)


def sample_corpus(world: ToyWorld, split_sizes: dict[str, int], out_dir: Path,
                  held_out_speakers: bool = False,
                  balance_languages: bool = False) -> dict[str, Path]:
    """Write manifests and frame files for each split; returns manifest paths."""
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split in sorted(split_sizes):
        utts = generate_split(world, split, split_sizes[split],
                              held_out_speakers=held_out_speakers,
                              balance_languages=balance_languages)
        manifest = out_dir / f"{split}.jsonl"
        with open(manifest, "w", encoding="utf-8") as f:
            for u in utts:
                fp = frames_dir / f"{u.id}.psfr"
                write_frames(fp, u.frames)
                rec = {"id": u.id, "text": u.text, "language": u.language,
                       "gender": u.gender, "speaker": u.speaker,
                       "frames_path": str(fp.relative_to(out_dir))}
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        manifests[split] = manifest
    return manifests


def load_manifest(manifest: Path) -> list[ToyUtterance]:
    manifest = Path(manifest)
    base = manifest.parent
    utts = []
    with open(manifest, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            utts.append(ToyUtterance(
                id=rec["id"], language=rec["language"], gender=rec["gender"],
                speaker=rec["speaker"], text=rec["text"],
                frames=read_frames(base / rec["frames_path"])))
    return utts
