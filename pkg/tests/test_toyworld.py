"""Toy world tests: construction invariants, rendering, oracles, corpus IO."""

import dataclasses

import numpy as np
import pytest

from polyspeech import toyworld as tw
from polyspeech.metrics import cer, cosine_similarity
from polyspeech.rng import stream


def world(seed=0, **kw):
    return tw.build_world(tw.ToyWorldConfig(seed=seed, **kw))


def test_build_deterministic():
    # [TRIVIAL] same seed twice gives identical worlds
    w1, w2 = world(3), world(3)
    assert w1.symbols == w2.symbols
    assert np.array_equal(w1.bases, w2.bases)
    assert np.array_equal(w1.speaker_vectors, w2.speaker_vectors)
    assert np.array_equal(w1.gender_direction, w2.gender_direction)


def test_separation_invariant():
    # [DERIVED] exhaustive pair scan: min distance > 4 sigma sqrt(D)
    w = world(1, noise_sigma_rel=0.05)
    d = w.cfg.frame_dim
    sep = w.min_separation()
    assert sep > 4.0 * w.cfg.noise_sigma * np.sqrt(d)
    diff = w.bases[:, None, :] - w.bases[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    assert abs(dist.min() - sep) < 1e-12


def test_gender_direction_orthogonal_to_bases():
    # [TRIVIAL] orthogonalization by construction
    w = world(2)
    assert np.abs(w.bases @ w.gender_direction).max() < 1e-10
    assert abs(np.linalg.norm(w.gender_direction) - 1.0) < 1e-12


def test_single_language_degenerate():
    # [TRIVIAL] LID degenerate case
    w = world(0, num_languages=1)
    assert w.languages == ["lang0"]
    assert all(lang == "lang0" for lang in w.speaker_language)


def test_crowded_config_errors():
    with pytest.raises((RuntimeError, ValueError)):
        world(0, symbols_per_language=8, num_languages=5, frame_dim=16)


def test_render_sigma_zero_construction():
    # [TRIVIAL] r identical frames = base + speaker + gender term
    w = world(4)
    rng = stream(4, "t")
    text = w.language_symbols[w.speaker_language[0]][0]
    frames = tw.render_utterance(w, text, 0, "male", 0.0, rng)
    assert frames.shape == (w.cfg.frames_per_symbol, w.cfg.frame_dim)
    expect = (w.bases[w.symbol_index(text)] + w.speaker_vectors[0]
              + w.cfg.gender_offset * w.gender_direction)
    for row in frames:
        assert np.allclose(row, expect, atol=1e-12)


def test_frame_count_law():
    # [TRIVIAL] |frames| == r * |text|
    w = world(5)
    for i in range(10):
        u = tw.make_utterance(w, f"u{i}", speaker=i % w.cfg.num_speakers)
        assert len(u.frames) == w.cfg.frames_per_symbol * len(u.text)


def test_render_unknown_symbol_errors():
    w = world(6)
    other_lang = w.speaker_language[1]
    foreign = [ch for ch in w.language_symbols[other_lang]
               if ch not in w.language_symbols[w.speaker_language[0]]]
    with pytest.raises(KeyError):
        tw.render_utterance(w, foreign[0], 0, "male", 0.0, stream(0, "x"))


def test_oracle_decode_exact_at_zero_noise():
    # [TRIVIAL] separation invariant makes sigma=0 decoding exact
    w = world(7)
    for i in range(20):
        u = tw.make_utterance(w, f"o{i}", speaker=i % w.cfg.num_speakers)
        assert tw.oracle_decode_text(w, u.frames) == u.text


def test_oracle_decode_cer_under_noise():
    # [DERIVED] Monte Carlo: sigma = 0.05 * min separation -> CER < 1%
    w = world(8, noise_sigma_rel=0.05)
    edits = total = 0
    for i in range(1000):
        u = tw.make_utterance(w, f"n{i}", speaker=i % w.cfg.num_speakers)
        hyp = tw.oracle_decode_text(w, u.frames)
        edits += round(cer(hyp, u.text) * len(u.text))
        total += len(u.text)
    assert edits / total < 0.01


def test_estimate_speaker_vector_exact():
    # [TRIVIAL] linear algebra identity at sigma=0
    w = world(9)
    u1 = tw.make_utterance(w, "s1", speaker=3)
    u2 = tw.make_utterance(w, "s2", speaker=3)
    sign = w.gender_sign(w.speaker_gender[3])
    expect = (w.speaker_vectors[3]
              + w.cfg.gender_offset * sign * w.gender_direction)
    e1 = tw.estimate_speaker_vector(u1.frames, w)
    e2 = tw.estimate_speaker_vector(u2.frames, w)
    assert np.allclose(e1, expect, atol=1e-10)
    assert np.allclose(e1, e2, atol=1e-10)


def test_speaker_cosine_gap():
    # [DERIVED] Monte Carlo: same-speaker vs different-speaker gap > 0.5
    w = world(10)
    utts = [tw.make_utterance(w, f"c{i}", speaker=i % w.cfg.num_speakers)
            for i in range(40)]
    est = {u.id: tw.estimate_speaker_vector(u.frames, w) for u in utts}
    same, diff = [], []
    for i, a in enumerate(utts):
        for b in utts[i + 1:]:
            sim = cosine_similarity(est[a.id], est[b.id])
            (same if a.speaker == b.speaker else diff).append(sim)
    assert np.mean(same) - np.mean(diff) > 0.5


# -- corpus ------------------------------------------------------------------------


def test_sample_corpus_counts_and_balance(tmp_path):
    # [TRIVIAL] exact split sizes; per-language counts within 1
    w = world(11)
    manifests = tw.sample_corpus(w, {"train": 25, "val": 10, "test": 10},
                                 tmp_path, balance_languages=True)
    train = tw.load_manifest(manifests["train"])
    assert len(train) == 25
    counts = {}
    for u in train:
        counts[u.language] = counts.get(u.language, 0) + 1
    assert max(counts.values()) - min(counts.values()) <= 1
    ids = [u.id for split in manifests
           for u in tw.load_manifest(manifests[split])]
    assert len(set(ids)) == len(ids)  # disjoint utterance ids


def test_held_out_speakers_disjoint(tmp_path):
    # [TRIVIAL] set check
    w = world(12)
    manifests = tw.sample_corpus(w, {"train": 30, "test": 15}, tmp_path,
                                 held_out_speakers=True)
    train_spk = {u.speaker for u in tw.load_manifest(manifests["train"])}
    test_spk = {u.speaker for u in tw.load_manifest(manifests["test"])}
    assert not (train_spk & test_spk)


def test_corpus_byte_identical_rerun(tmp_path):
    # [TRIVIAL] determinism of every byte
    w = world(13)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    m1 = tw.sample_corpus(w, {"train": 8}, d1)
    m2 = tw.sample_corpus(w, {"train": 8}, d2)
    assert m1["train"].read_bytes() == m2["train"].read_bytes()
    for f in sorted((d1 / "frames").iterdir()):
        assert f.read_bytes() == (d2 / "frames" / f.name).read_bytes()


def test_frames_roundtrip(tmp_path):
    # [TRIVIAL] PSFR write/read identity at float32 resolution
    frames = np.random.default_rng(0).normal(size=(5, 16))
    path = tmp_path / "x.psfr"
    tw.write_frames(path, frames)
    back = tw.read_frames(path)
    assert back.shape == frames.shape
    assert np.allclose(back, frames, atol=1e-6)
    assert path.read_bytes()[:4] == b"PSFR"


def test_frames_bad_magic_errors(tmp_path):
    path = tmp_path / "bad.psfr"
    path.write_bytes(b"XXXX" + b"\0" * 12)
    with pytest.raises(ValueError):
        tw.read_frames(path)


def test_noise_sigma_rel_resolution():
    # [TRIVIAL] resolved sigma = rel * min separation
    w = world(14, noise_sigma_rel=0.05)
    assert abs(w.cfg.noise_sigma - 0.05 * w.min_separation()) < 1e-12
