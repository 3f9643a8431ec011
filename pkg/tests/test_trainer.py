"""Trainer tests: task sampling statistics, accumulation identities,
text-LM initialization, model selection."""

import math

import numpy as np
import pytest

from polyspeech.lm import LmConfig, MultiModalLm, lm_loss
from polyspeech.numerics import AdamState, adam_update
from polyspeech.rng import stream
from polyspeech.tasks import (ASR, LID, RawExample, Vocab, assemble)
from polyspeech.trainer import (TEXT_LM_TASK, TaskMix, TrainConfig,
                                build_text_lm, example_loss,
                                init_from_text_lm, sample_task, select_best,
                                text_lm_examples, train_lm, train_text_lm,
                                train_update, validation_loss)


def make_vocab():
    return Vocab(symbols="abc", languages=["lang0", "lang1"],
                 genders=["female", "male"], speech_codebook_size=8)


def lm_cfg(**kw):
    v = make_vocab()
    base = dict(text_vocab_size=v.text_size, speech_vocab_size=v.speech_size,
                continuous_input_dim=4, num_layers=1, num_heads=2,
                d_model=8, d_ffn=16, max_seq_len=32)
    base.update(kw)
    return LmConfig(**base)


SYMBOL_FRAMES = {ch: stream(50, "sym", ch).normal(size=4)
                 for ch in "abc"}


def make_examples(task, n, seed, vocab):
    """Learnable toy data: frames are fixed per-symbol vectors."""
    rng = stream(seed, "trainer-data", task)
    out = []
    for i in range(n):
        text = "".join(rng.choice(list("abc"),
                                  size=int(rng.integers(2, 5))))
        frames = np.stack([SYMBOL_FRAMES[ch] for ch in text])
        lang = "lang0" if text[0] == "a" else "lang1"
        ex = RawExample(id=f"{task}{i}", frames=frames, text=text,
                        language=lang, gender="male", speaker=0)
        out.append(assemble(ex, task, vocab))
    return out


def heads(vocab):
    return {ASR: vocab.text_size, LID: vocab.text_size}


# -- task mix / sampling ----------------------------------------------------------


def test_task_mix_validation():
    with pytest.raises(ValueError):
        TaskMix({})
    with pytest.raises(ValueError):
        TaskMix({"asr": -1})
    with pytest.raises(ValueError):
        TaskMix({"asr": 0, "lid": 0})


def test_task_mix_probabilities():
    # [TRIVIAL] volume-proportional: 300 vs 100 -> 0.75 / 0.25
    mix = TaskMix({"asr": 300, "lid": 100})
    assert mix.tasks == ["asr", "lid"]
    assert np.allclose(mix.probabilities, [0.75, 0.25], atol=1e-12)


def test_sample_task_frequencies():
    # [DERIVED] binomial 3 sigma over N=20000 draws at p=0.75
    mix = TaskMix({"asr": 300, "lid": 100})
    rng = stream(0, "freq")
    n = 20_000
    hits = sum(sample_task(rng, mix) == "asr" for _ in range(n))
    p = 0.75
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_sample_task_single_task():
    # [TRIVIAL]
    mix = TaskMix({"asr": 10})
    rng = stream(1, "single")
    assert all(sample_task(rng, mix) == "asr" for _ in range(50))


def test_zero_size_task_never_sampled():
    mix = TaskMix({"asr": 10, "lid": 0})
    rng = stream(2, "zero")
    assert all(sample_task(rng, mix) == "asr" for _ in range(100))


# -- accumulation ------------------------------------------------------------------


def test_accumulation_one_matches_plain_step():
    # [DERIVED] acc=1: train_update == hand-written zero_grad / backward /
    # adam step with the same rng draws, bitwise
    v = make_vocab()
    data = {ASR: make_examples(ASR, 6, 3, v)}
    mix = TaskMix.from_data(data)
    cfg = TrainConfig(accumulation_steps=1, batch_size=3, seed=0,
                      peak_lr=1e-3, warmup_steps=5)

    m1 = MultiModalLm(lm_cfg(), heads(v), seed=7)
    o1 = AdamState(peak_lr=1e-3, warmup_steps=5)
    rng1 = stream(9, "acc")
    train_update(m1, o1, data, mix, cfg, rng1)

    m2 = MultiModalLm(lm_cfg(), heads(v), seed=7)
    o2 = AdamState(peak_lr=1e-3, warmup_steps=5)
    rng2 = stream(9, "acc")
    sample_task(rng2, mix)  # same draw order as train_update
    idx = rng2.choice(6, size=3, replace=False)
    m2.zero_grad()
    terms = [example_loss(m2, data[ASR][int(i)]) for i in idx]
    loss = (terms[0] + terms[1] + terms[2]) * (1.0 / 3)
    (loss * 1.0).backward()
    adam_update(o2, m2.params)

    for name in m1.params:
        assert np.array_equal(m1.params[name].data, m2.params[name].data), name


def test_accumulation_k_copies_equals_single_batch():
    # [DERIVED] k identical micro-batches with 1/k scaling == one step on
    # that batch (up to fp summation order)
    v = make_vocab()
    pool = make_examples(ASR, 2, 4, v)
    data = {ASR: pool}
    mix = TaskMix.from_data(data)

    def run(acc):
        model = MultiModalLm(lm_cfg(), heads(v), seed=11)
        opt = AdamState(peak_lr=1e-3, warmup_steps=5)
        cfg = TrainConfig(accumulation_steps=acc, batch_size=2, seed=0,
                          peak_lr=1e-3, warmup_steps=5)
        train_update(model, opt, data, mix, cfg, stream(12, "copies"))
        return model

    m1, m4 = run(1), run(4)
    for name in m1.params:
        diff = np.abs(m1.params[name].data - m4.params[name].data).max()
        assert diff < 1e-10, (name, diff)


def test_train_update_empty_pool_errors():
    v = make_vocab()
    data = {ASR: []}
    with pytest.raises(ValueError):
        train_update(MultiModalLm(lm_cfg(), heads(v)),
                     AdamState(peak_lr=1e-3, warmup_steps=5), data,
                     TaskMix({ASR: 1}), TrainConfig(), stream(0, "e"))


# -- validation loss ----------------------------------------------------------------


def test_validation_loss_is_probability_weighted():
    # [DERIVED] recompute by hand from example_loss
    v = make_vocab()
    model = MultiModalLm(lm_cfg(), heads(v), seed=2)
    val = {ASR: make_examples(ASR, 3, 5, v), LID: make_examples(LID, 2, 6, v)}
    mix = TaskMix({ASR: 30, LID: 10})
    got = validation_loss(model, val, mix)
    mean_asr = np.mean([example_loss(model, e).item() for e in val[ASR]])
    mean_lid = np.mean([example_loss(model, e).item() for e in val[LID]])
    assert abs(got - (0.75 * mean_asr + 0.25 * mean_lid)) < 1e-12


def test_validation_loss_missing_task_errors():
    v = make_vocab()
    model = MultiModalLm(lm_cfg(), heads(v))
    with pytest.raises(ValueError):
        validation_loss(model, {}, TaskMix({ASR: 1}))


# -- selection -------------------------------------------------------------------------


def test_select_best_argmin_and_ties():
    # [TRIVIAL] ties resolve to the earliest checkpoint
    assert select_best([("a", 2.0), ("b", 1.0), ("c", 3.0)]) == "b"
    assert select_best([("a", 1.0), ("b", 1.0)]) == "a"
    assert select_best([("only", 5.0)]) == "only"
    with pytest.raises(ValueError):
        select_best([])


# -- full loop -------------------------------------------------------------------------


def test_train_lm_convergence_and_logging():
    # [DERIVED] 200 updates on learnable toy ASR/LID data: validation
    # mixture loss drops well below the untrained value
    v = make_vocab()
    train = {ASR: make_examples(ASR, 24, 7, v),
             LID: make_examples(LID, 24, 8, v)}
    val = {ASR: make_examples(ASR, 6, 9, v),
           LID: make_examples(LID, 6, 10, v)}
    model = MultiModalLm(lm_cfg(num_layers=2), heads(v), seed=0)
    start = validation_loss(model, val, TaskMix.from_data(train))
    cfg = TrainConfig(accumulation_steps=2, batch_size=4, max_updates=200,
                      val_every=50, seed=0, peak_lr=3e-3, warmup_steps=20)
    seen = []
    result = train_lm(model, train, val, cfg,
                      on_validate=lambda u, l, m: seen.append(u))
    assert seen == [50, 100, 150, 200]
    assert len(result.log_rows) == 200
    assert result.log_rows[0]["update"] == 1
    assert set(result.log_rows[0]) == {"update", "task", "loss", "lr",
                                       "wallclock_ms"}
    final = result.validations[-1][1]
    assert final < 0.5 * start
    assert result.best_update in [u for u, _ in result.validations]


def test_train_lm_deterministic_losses():
    # [TRIVIAL] same seed -> identical loss trajectory
    v = make_vocab()
    train = {ASR: make_examples(ASR, 8, 11, v)}
    val = {ASR: make_examples(ASR, 2, 12, v)}
    cfg = TrainConfig(accumulation_steps=2, batch_size=2, max_updates=10,
                      val_every=5, seed=3, peak_lr=1e-3, warmup_steps=5)
    r1 = train_lm(MultiModalLm(lm_cfg(), heads(v), seed=1), train, val, cfg)
    r2 = train_lm(MultiModalLm(lm_cfg(), heads(v), seed=1), train, val, cfg)
    assert [r["loss"] for r in r1.log_rows] == [r["loss"] for r in r2.log_rows]
    assert r1.validations == r2.validations


# -- text LM init ------------------------------------------------------------------------


def test_text_lm_examples_layout():
    # [TRIVIAL] boundary 1, targets shifted by one plus EOS
    v = make_vocab()
    exs = text_lm_examples(["ab", "c"], v)
    assert exs[0].boundary == 1
    assert list(exs[0].target_ids) == [v.text_id("b"), v.text_eos]
    assert list(exs[1].target_ids) == [v.text_eos]
    with pytest.raises(ValueError):
        text_lm_examples([""], v)


def test_train_text_lm_learns():
    # [DERIVED] repetitive corpus: loss falls below uniform entropy
    v = make_vocab()
    texts = ["abab", "abba", "baba", "aabb"] * 8
    model = build_text_lm(lm_cfg(), seed=0)
    cfg = TrainConfig(accumulation_steps=1, batch_size=4, max_updates=120,
                      val_every=40, seed=0, peak_lr=3e-3, warmup_steps=20)
    result = train_text_lm(model, texts, v, cfg)
    assert result.validations[-1][1] < math.log(v.text_size)


def test_init_from_text_lm_transfers_trunk():
    # [DERIVED] pure-text forward passes agree bitwise after transfer;
    # speech embeddings stay fresh; the source is untouched
    v = make_vocab()
    text_lm = build_text_lm(lm_cfg(), seed=5)
    src_snapshot = {n: p.data.copy() for n, p in text_lm.params.items()}
    target = MultiModalLm(lm_cfg(), heads(v), seed=6)
    fresh_speech = target.params["speech_emb.0"].data.copy()
    init_from_text_lm(text_lm, target)

    for name in target.trunk_param_names():
        assert np.array_equal(target.params[name].data,
                              text_lm.params[name].data)
    assert np.array_equal(target.params["speech_emb.0"].data, fresh_speech)
    for name, snap in src_snapshot.items():
        assert np.array_equal(text_lm.params[name].data, snap)


def test_init_from_text_lm_shape_mismatch_errors():
    v = make_vocab()
    small = build_text_lm(lm_cfg(), seed=0)
    big = MultiModalLm(lm_cfg(d_model=16, d_ffn=32), heads(v), seed=0)
    with pytest.raises(ValueError):
        init_from_text_lm(small, big)
