from __future__ import annotations

import numpy as np
import pytest

from dcdkit import tasks as T


def test_ioi_abba_layout(vocab):
    for p in T.gen_ioi("abba", 20, seed=1):
        w = [vocab.words[t] for t in p.clean]
        io, s = p.correct, p.counterfactuals[0]
        assert p.clean[1] == io and p.clean[3] == s and p.clean[7] == s
        assert w[-1] == "to" and p.answer_pos == len(p.clean) - 1
        assert len(p.clean) == len(p.corrupt)


def test_ioi_baba_layout():
    for p in T.gen_ioi("baba", 20, seed=1):
        assert p.clean[1] == p.counterfactuals[0] and p.clean[3] == p.correct


def test_ioi_corruption_slot():
    for variant in T.IOI_VARIANTS:
        for p in T.gen_ioi(variant, 30, seed=5):
            diff = [i for i, (a, b) in enumerate(zip(p.clean, p.corrupt)) if a != b]
            assert diff, variant
            for i in diff:
                assert p.corrupt[i] not in (p.correct,) + p.counterfactuals
            assert len(p.clean) == len(p.corrupt)


def test_ioi_three_person_swaps_two_names():
    for p in T.gen_ioi("3person", 10):
        diff = [i for i, (a, b) in enumerate(zip(p.clean, p.corrupt)) if a != b]
        assert len(diff) == 2 and len(p.counterfactuals) == 2
        assert not set(p.corrupt[i] for i in diff) & set(p.clean)


def test_eb_two_pairs(vocab):
    for p in T.gen_entity_binding("2_comma", 20, seed=3):
        ents = [p.clean[0], p.clean[4]]
        labels = [p.clean[2], p.clean[6]]
        q = labels.index(p.clean[-2])
        assert p.correct == ents[q] and p.counterfactuals == (ents[1 - q],)
        assert p.corrupt[-2] not in labels
        assert p.clean[:-2] == p.corrupt[:-2]


@pytest.mark.parametrize("k", [1, 4, 8])
def test_eb_position_variants(k):
    for p in T.gen_entity_binding(f"p{k}", 10):
        labels = [p.clean[4 * i + 2] for i in range(8)]
        assert labels.index(p.clean[-2]) == k - 1
        assert p.correct == p.clean[4 * (k - 1)]


def test_eb_errors():
    with pytest.raises(T.TaskError):
        T.gen_entity_binding("9_comma", 1)
    with pytest.raises(T.TaskError):
        T.gen_entity_binding("p9", 1)


@pytest.mark.parametrize("variant", T.ARITH_VARIANTS)
def test_arithmetic_correct(variant, vocab):
    pairs = T.gen_arithmetic(variant, 40, seed=2)
    nums = vocab.classes["number"]
    for p in pairs:
        ops = [nums.index(t) for t in p.clean if t in nums]
        assert p.correct == nums[sum(ops)]
        cops = [nums.index(t) for t in p.corrupt if t in nums]
        assert sum(cops) != sum(ops)
        assert len(p.counterfactuals) == len(nums) - 1


@pytest.mark.parametrize("k", [2, 3, 4])
def test_sequence_corruption(k):
    for p in T.gen_sequence_completion(k, 30, seed=k):
        changed = {b for a, b in zip(p.clean, p.corrupt) if a != b}
        assert changed and not changed & set(p.clean)
        assert p.correct not in p.counterfactuals
        assert set(p.counterfactuals) == set(p.clean) - {p.correct}


def test_sequence_two_gram_pattern():
    for p in T.gen_sequence_completion(2, 20, seed=0):
        body = p.clean[len(p.clean) - 14 :]
        base = body[:5]
        assert body[5:10] == base and body[10:] == base[:4] and p.correct == base[4]
        # last two pattern tokens replaced in every repetition
        cbody = p.corrupt[len(p.corrupt) - 14 :]
        assert cbody[3] != base[3] and cbody[4] != base[4] and cbody[8] != base[3]


@pytest.mark.parametrize("k", [3, 4])
def test_sequence_answer_needs_longer_context(k):
    for p in T.gen_sequence_completion(k, 30, seed=1):
        c = p.clean
        last = c[-1]
        hits = [i for i in range(len(c) - 1) if c[i] == last]
        assert len(hits) == 2  # final token is ambiguous on its own
        follow = {c[i + 1] for i in hits}
        assert p.correct in follow and len(follow) == 2
        # the correct continuation is the one whose longer context matches the query
        back = k - 1
        good = [i for i in hits if c[i - back + 1 : i + 1] == c[len(c) - back :]]
        assert [c[i + 1] for i in good] == [p.correct]


def test_mixture_even_split():
    spec = T.DatasetSpec([("sequence", "2gram", 1), ("sequence", "3gram", 1)], 100, seed=4)
    ds = T.build_mixture(spec)
    allp = ds.train + ds.val + ds.test
    assert len(allp) == 100 and len(ds.train) == 60 and len(ds.val) == 20
    assert sum(p.variant == "2gram" for p in allp) == 50


def test_mixture_deterministic_and_zero_weight():
    spec = T.DatasetSpec([("ioi", "abba", 0.3), ("arithmetic", "two_op", 0.7)], 50, seed=9)
    a, b = T.build_mixture(spec), T.build_mixture(spec)
    assert a.train == b.train and a.test == b.test
    pure = T.build_mixture(T.DatasetSpec([("ioi", "abba", 0.0), ("arithmetic", "two_op", 1.0)], 20, seed=9))
    assert all(p.task == "arithmetic" for p in pure.train + pure.val + pure.test)
    with pytest.raises(T.TaskError):
        T.DatasetSpec([("ioi", "abba", 0.0)], 10)


def test_allocate_largest_remainder():
    assert T.allocate(10, [1 / 3] * 3) == [4, 3, 3]
    assert sum(T.allocate(97, [0.15, 0.35, 0.5])) == 97


def test_ratio_sweep():
    r = T.ratio_sweep(0.1)
    assert len(r) == 11 and r[0] == 0.0 and r[-1] == 1.0 and r[3] == 0.3


def test_jsonl_roundtrip(tmp_path):
    pairs = T.gen_ioi("mixed", 5) + T.gen_entity_binding("3_period", 3)
    T.write_jsonl(pairs, tmp_path / "d.jsonl")
    assert T.read_jsonl(tmp_path / "d.jsonl") == pairs


def test_generators_deterministic():
    for task, variant in [("ioi", "mixed"), ("entity_binding", "4_color"), ("arithmetic", "three_op"),
                          ("sequence", "4gram")]:
        assert T.generate(task, variant, 8, seed=7) == T.generate(task, variant, 8, seed=7)
        assert T.generate(task, variant, 8, seed=7) != T.generate(task, variant, 8, seed=8)


def test_prompt_pair_validation():
    with pytest.raises(T.TaskError):
        T.PromptPair("t", "v", (1, 2), (1,), 1, 3, (4,))
    with pytest.raises(T.TaskError):
        T.PromptPair("t", "v", (1, 2), (1, 3), 1, 3, (3,))
    with pytest.raises(T.TaskError):
        T.PromptPair("t", "v", (1, 2), (1, 3), 1, 3, ())


def test_vocab_words_are_single_tokens(vocab):
    assert len(set(vocab.words)) == len(vocab.words) == 99
    assert len(vocab.classes["number"]) == 20
    assert np.all(np.diff(vocab.classes["number"]) == 1)
