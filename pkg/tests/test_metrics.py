"""Metric tests: CER edit-distance oracles, macro-F1 hand cases, SECS."""

from functools import lru_cache

import numpy as np
import pytest

from polyspeech import metrics as mt


# -- cer ------------------------------------------------------------------------


def test_cer_identity():
    # [TRIVIAL]
    assert mt.cer("abc", "abc") == 0.0


def test_cer_one_substitution():
    # [TRIVIAL] 1/3
    assert abs(mt.cer("axc", "abc") - 1 / 3) < 1e-12


def test_cer_can_exceed_one():
    # [TRIVIAL] two insertions over reference length 1
    assert mt.cer("abc", "a") == 2.0


def test_cer_empty_ref_errors():
    with pytest.raises(ValueError):
        mt.cer("a", "")


def test_corpus_cer_pools_edits():
    # [TRIVIAL] sum of edits over sum of ref lengths
    assert abs(mt.corpus_cer(["ab", "x"], ["ab", "y"]) - 1 / 3) < 1e-12


def _brute_edit(a: str, b: str) -> int:
    """Independent oracle: naive memoized recursion. [DERIVED]"""

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        sub = go(i - 1, j - 1) + (a[i - 1] != b[j - 1])
        return min(sub, go(i - 1, j) + 1, go(i, j - 1) + 1)

    return go(len(a), len(b))


def test_edit_distance_matches_brute_force():
    # [DERIVED] exhaustive to length 4, sampled 5..6, over 3 symbols
    syms = "abc"
    short = [""]
    for _ in range(4):
        short = short + [s + c for s in short if len(s) == _ for c in syms]
    short = sorted(set(short))
    for a in short:
        for b in short:
            assert mt.edit_distance(a, b) == _brute_edit(a, b)
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = "".join(rng.choice(list(syms), size=rng.integers(5, 7)))
        b = "".join(rng.choice(list(syms), size=rng.integers(5, 7)))
        assert mt.edit_distance(a, b) == _brute_edit(a, b)


def test_edit_distance_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = "".join(rng.choice(list("ab"), size=rng.integers(0, 6)))
        b = "".join(rng.choice(list("ab"), size=rng.integers(0, 6)))
        assert mt.edit_distance(a, b) == mt.edit_distance(b, a)


# -- accuracy / macro F1 -----------------------------------------------------------


def test_accuracy_cases():
    # [TRIVIAL]
    assert mt.accuracy(["a", "b"], ["a", "b"]) == 1.0
    assert mt.accuracy(["a", "b"], ["b", "a"]) == 0.0
    assert mt.accuracy(["a", "b", "c", "d"], ["a", "b", "c", "x"]) == 0.75


def test_accuracy_empty_errors():
    with pytest.raises(ValueError):
        mt.accuracy([], [])


def test_macro_f1_perfect():
    # [TRIVIAL]
    assert mt.macro_f1(["a", "b"], ["a", "b"], ["a", "b"]) == 1.0


def test_macro_f1_all_wrong_binary():
    # [TRIVIAL]
    assert mt.macro_f1(["b", "a"], ["a", "b"], ["a", "b"]) == 0.0


def test_macro_f1_hand_case():
    # [DERIVED] refs [A,A,B], hyps [A,B,B]: both classes F1 = 2/3
    got = mt.macro_f1(["A", "B", "B"], ["A", "A", "B"], ["A", "B"])
    assert abs(got - 2 / 3) < 1e-12


def test_macro_f1_absent_class():
    # [TRIVIAL] absent class scores 0 by default, excluded with the flag
    full = mt.macro_f1(["a"], ["a"], ["a", "ghost"])
    assert abs(full - 0.5) < 1e-12
    skipped = mt.macro_f1(["a"], ["a"], ["a", "ghost"], skip_absent=True)
    assert skipped == 1.0


def test_macro_f1_relabeling_invariant():
    # [TRIVIAL] permutation of class names
    hyps, refs = ["a", "b", "a", "c"], ["a", "a", "b", "c"]
    ren = {"a": "x", "b": "y", "c": "z"}
    before = mt.macro_f1(hyps, refs, ["a", "b", "c"])
    after = mt.macro_f1([ren[h] for h in hyps], [ren[r] for r in refs],
                        ["x", "y", "z"])
    assert abs(before - after) < 1e-12


def test_macro_f1_length_mismatch_errors():
    with pytest.raises(ValueError):
        mt.macro_f1(["a"], ["a", "b"], ["a", "b"])


# -- cosine / SECS -------------------------------------------------------------------


def test_cosine_identity_and_orthogonal():
    # [TRIVIAL]
    v = np.array([1.0, 2.0, 3.0])
    assert abs(mt.cosine_similarity(v, v) - 1.0) < 1e-12
    assert abs(mt.cosine_similarity(np.array([1.0, 0.0]),
                                    np.array([0.0, 5.0]))) < 1e-12


def test_cosine_zero_norm_errors():
    with pytest.raises(ValueError):
        mt.cosine_similarity(np.zeros(3), np.ones(3))


def test_secs_identical_frames():
    # [TRIVIAL] identical frames embed identically
    frames = np.random.default_rng(0).normal(size=(4, 8))
    val = mt.secs_toy(frames, frames, lambda f: f.mean(axis=0))
    assert abs(val - 1.0) < 1e-12


def test_secs_same_speaker_exact(tmp_path):
    # [TRIVIAL] oracle mode, sigma=0 -> exactly 1.0
    from polyspeech import toyworld as tw
    w = tw.build_world(tw.ToyWorldConfig(seed=21))
    u1 = tw.make_utterance(w, "p1", speaker=2)
    u2 = tw.make_utterance(w, "p2", speaker=2)
    val = mt.secs_toy(u1.frames, u2.frames,
                      lambda f: tw.estimate_speaker_vector(f, w))
    assert abs(val - 1.0) < 1e-9


# -- report CSV ----------------------------------------------------------------------


def test_write_report_csv(tmp_path):
    # [TRIVIAL] format contract: task,metric,value,n
    path = tmp_path / "r.csv"
    mt.write_report_csv(path, [mt.EvalReport("asr", "cer", 0.25, 4)])
    lines = path.read_text().splitlines()
    assert lines[0] == "task,metric,value,n"
    assert lines[1].startswith("asr,cer,0.25")
