"""Decoding tests: sampling statistics, beam oracles, truncation."""

import itertools
import math

import numpy as np
import pytest

from polyspeech.decoding import (BEAM, GREEDY, TOP_K, DecodeConfig,
                                 beam_search, classify, generate,
                                 greedy_decode, lm_step_fn, top_k_sample)
from polyspeech.lm import LmConfig, MultiModalLm, frame_el, task_el, text_el
from polyspeech.rng import stream


# -- top-k sampling -------------------------------------------------------------


def test_top_k_k1_is_argmax():
    # [TRIVIAL]
    rng = stream(0, "k1")
    logits = np.array([0.1, 3.0, -2.0, 1.5])
    for _ in range(20):
        assert top_k_sample(logits, 1, rng) == 1


def test_top_k_membership():
    # [TRIVIAL] only the k best ids ever appear
    rng = stream(1, "member")
    logits = np.array([2.0, 1.0, 0.0, -1.0, 5.0])
    seen = {top_k_sample(logits, 2, rng) for _ in range(2000)}
    assert seen == {0, 4}


def test_top_k_frequencies_match_softmax():
    # [DERIVED] logits [2,1,0,-1], k=2: renormalized softmax over {2,1}
    # gives p = e/(e+1) for the top id; binomial 3 sigma over N=100000
    rng = stream(2, "freq")
    logits = np.array([2.0, 1.0, 0.0, -1.0])
    n = 100_000
    hits = sum(top_k_sample(logits, 2, rng) == 0 for _ in range(n))
    p = math.e / (math.e + 1)
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_top_k_uniform_chi_square():
    # [DERIVED] equal logits, k=4: chi-square GOF, alpha = 0.001
    # (df=3 critical value 16.27)
    rng = stream(3, "chi")
    n = 40_000
    counts = np.zeros(4)
    for _ in range(n):
        counts[top_k_sample(np.zeros(4), 4, rng)] += 1
    chi2 = ((counts - n / 4) ** 2 / (n / 4)).sum()
    assert chi2 < 16.27


def test_top_k_temperature_sharpens():
    # [DERIVED] low temperature concentrates on the argmax
    rng = stream(4, "temp")
    logits = np.array([1.0, 0.0])
    hits = sum(top_k_sample(logits, 2, rng, temperature=0.05) == 0
               for _ in range(2000))
    assert hits / 2000 > 0.99


def test_top_k_validates_k():
    with pytest.raises(ValueError):
        top_k_sample(np.zeros(3), 4, stream(0, "v"))


# -- enumerable oracle model -------------------------------------------------------


def table_fn(table, vocab):
    """Scoring oracle: explicit log-prob table keyed by prefix tuple."""

    def fn(ids):
        probs = np.asarray(table[tuple(ids)], dtype=np.float64)
        assert probs.size == vocab
        return np.log(probs)

    return fn


def exhaustive_best(table, vocab, eos, max_len):
    """[DERIVED] independent oracle: enumerate every id sequence up to
    max_len and return the best finished (sequence, logprob)."""
    best = None
    for n in range(max_len + 1):
        for seq in itertools.product(range(vocab), repeat=n):
            if eos in seq:
                continue
            lp = 0.0
            ok = True
            for i in range(n):
                row = table.get(tuple(seq[:i]))
                if row is None:
                    ok = False
                    break
                lp += math.log(row[seq[i]])
            row = table.get(tuple(seq))
            if not ok or row is None:
                continue
            lp += math.log(row[eos])
            if best is None or lp > best[1]:
                best = (seq, lp)
    return best


def two_step_table():
    # vocab {0, 1, EOS=2}; greedy is suboptimal by construction:
    # greedy takes 0 first (p 0.5) then gets a poor continuation
    return {
        (): [0.5, 0.4, 0.1],
        (0,): [0.3, 0.3, 0.4],
        (1,): [0.05, 0.05, 0.9],
        (0, 0): [1e-12, 1e-12, 1.0],
        (0, 1): [1e-12, 1e-12, 1.0],
        (1, 0): [1e-12, 1e-12, 1.0],
        (1, 1): [1e-12, 1e-12, 1.0],
    }


def test_beam_matches_exhaustive_oracle():
    # [DERIVED] beam wide enough == exhaustive enumeration
    table = two_step_table()
    fn = table_fn(table, 3)
    expect = exhaustive_best(table, 3, 2, 2)
    hyp = beam_search(fn, 2, DecodeConfig(mode=BEAM, beam_size=3, max_len=4))
    assert tuple(hyp.ids) == expect[0] == (1,)
    assert abs(hyp.logprob - expect[1]) < 1e-12


def test_beam_beats_or_ties_greedy():
    # [DERIVED] on the crafted table greedy picks 0 then EOS: logprob
    # ln(0.5*0.4); beam finds 1 then EOS: ln(0.4*0.9)
    fn = table_fn(two_step_table(), 3)
    cfg = DecodeConfig(mode=BEAM, beam_size=3, max_len=4)
    g = greedy_decode(fn, 2, cfg)
    b = beam_search(fn, 2, cfg)
    assert abs(g.logprob - math.log(0.5 * 0.4)) < 1e-12
    assert abs(b.logprob - math.log(0.4 * 0.9)) < 1e-12
    assert b.logprob > g.logprob


def test_beam_size_one_is_greedy():
    # [TRIVIAL] beam of 1 == greedy on every table
    rng = stream(5, "b1")
    for trial in range(20):
        table = {}
        for n in range(3):
            for seq in itertools.product(range(2), repeat=n):
                p = rng.dirichlet(np.ones(3))
                table[seq] = p
        for seq in itertools.product(range(2), repeat=3):
            table[seq] = [1e-12, 1e-12, 1.0]
        fn = table_fn(table, 3)
        cfg = DecodeConfig(mode=BEAM, beam_size=1, max_len=5)
        g = greedy_decode(fn, 2, cfg)
        b = beam_search(fn, 2, cfg)
        assert tuple(g.ids) == tuple(b.ids)
        assert abs(g.logprob - b.logprob) < 1e-12


def test_beam_never_worse_than_greedy_random_tables():
    # [DERIVED] monotonicity of wider search on random enumerable models
    rng = stream(6, "bg")
    for trial in range(20):
        table = {}
        for n in range(4):
            for seq in itertools.product(range(3), repeat=n):
                table[seq] = rng.dirichlet(np.ones(4))
        for seq in itertools.product(range(3), repeat=4):
            table[seq] = [1e-12, 1e-12, 1e-12, 1.0]
        fn = table_fn(table, 4)
        g = greedy_decode(fn, 3, DecodeConfig(mode=GREEDY, max_len=6))
        b = beam_search(fn, 3,
                        DecodeConfig(mode=BEAM, beam_size=4, max_len=6))
        assert b.finished and g.finished
        assert b.logprob >= g.logprob - 1e-12


def test_greedy_immediate_eos():
    # [TRIVIAL] EOS as argmax of the empty prefix
    fn = table_fn({(): [0.1, 0.1, 0.8]}, 3)
    hyp = greedy_decode(fn, 2, DecodeConfig(max_len=4))
    assert hyp.ids == () and hyp.finished


def test_truncation_flag():
    # [TRIVIAL] model that never emits EOS
    def fn(ids):
        return np.log([0.9, 0.05, 0.05])
    ids, truncated = generate(fn, 2, DecodeConfig(mode=GREEDY, max_len=4))
    assert truncated and ids == [0, 0, 0, 0]
    hyp = beam_search(fn, 2, DecodeConfig(mode=BEAM, beam_size=2, max_len=4))
    assert not hyp.finished


def test_generate_top_k_deterministic_given_rng():
    # [TRIVIAL]
    table = two_step_table()
    fn = table_fn(table, 3)
    cfg = DecodeConfig(mode=TOP_K, k=2, max_len=4)
    a = generate(fn, 2, cfg, stream(7, "gen"))
    b = generate(fn, 2, cfg, stream(7, "gen"))
    assert a == b


def test_generate_top_k1_equals_greedy():
    # [TRIVIAL] k=1 sampling degenerates to greedy
    fn = table_fn(two_step_table(), 3)
    ids_k1, _ = generate(fn, 2, DecodeConfig(mode=TOP_K, k=1, max_len=4),
                         stream(8, "k1"))
    ids_g, _ = generate(fn, 2, DecodeConfig(mode=GREEDY, max_len=4))
    assert ids_k1 == ids_g


def test_generate_requires_rng_for_top_k():
    with pytest.raises(ValueError):
        generate(table_fn(two_step_table(), 3), 2, DecodeConfig(mode=TOP_K))


def test_unknown_mode_errors():
    with pytest.raises(ValueError):
        generate(table_fn(two_step_table(), 3), 2,
                 DecodeConfig(mode="magic"), stream(0, "m"))


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(k=0)


# -- LM adapters ----------------------------------------------------------------------


def tiny_lm():
    cfg = LmConfig(text_vocab_size=6, speech_vocab_size=4,
                   continuous_input_dim=3, num_layers=1, num_heads=2,
                   d_model=8, d_ffn=16, max_seq_len=32)
    return MultiModalLm(cfg, {"asr": 6, "lid": 6}, seed=0)


def test_lm_step_fn_matches_forward():
    # [DERIVED] adapter log-probs == log softmax of the model's last logits
    model = tiny_lm()
    prefix = [frame_el(np.ones(3)), task_el(0)]
    fn = lm_step_fn(model, prefix, 2, "asr")
    logp = fn((1,))
    out = model.forward(prefix + [text_el(1)], "asr", 2)
    logits = out.logits.data[-1]
    expect = logits - logits.max()
    expect = expect - np.log(np.exp(expect).sum())
    assert np.allclose(logp, expect, atol=1e-12)
    assert abs(np.exp(logp).sum() - 1.0) < 1e-9


def test_classify_constrained_and_unconstrained():
    # [TRIVIAL] constrained pick always inside the allowed set
    model = tiny_lm()
    prefix = [frame_el(np.ones(3)), task_el(1)]
    allowed = [2, 3]
    got = classify(model, prefix, 2, "lid", allowed)
    assert got in allowed
    free = classify(model, prefix, 2, "lid", allowed, constrained=False)
    logp = lm_step_fn(model, prefix, 2, "lid")(())
    assert free == int(logp.argmax())
