import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reservoir_transformers import stack as S
from reservoir_transformers import tasks as T
from reservoir_transformers.errors import ConfigError, ContractError
from oracles import brute_bleu


# -- synthetic translation tasks --------------------------------------------------------------


@pytest.mark.parametrize("task,expected", [
    ("copy", [3, 1, 2]),
    ("reverse", [2, 1, 3]),
    ("sort", [1, 2, 3]),
])
def test_task_examples(task, expected):
    assert T.apply_task(task, [3, 1, 2]) == expected


def test_spec_validation():
    with pytest.raises(ConfigError, match="vocab_size"):
        T.SyntheticSeq2SeqSpec(vocab_size=1)
    with pytest.raises(ConfigError, match="task"):
        T.SyntheticSeq2SeqSpec(task="shuffle")
    with pytest.raises(ConfigError, match="min_len"):
        T.SyntheticSeq2SeqSpec(min_len=6, max_len=5)


def test_generation_is_deterministic_and_in_range():
    spec = T.SyntheticSeq2SeqSpec(task="reverse", vocab_size=7, min_len=2, max_len=4, n_train=50, n_val=20,
                                  n_test=20, seed=9)
    a, b = T.generate_seq2seq(spec), T.generate_seq2seq(spec)
    assert a == b
    assert [len(a[k]) for k in ("train", "val", "test")] == [50, 20, 20]
    for src, tgt in a["train"]:
        assert 2 <= len(src) <= 4 and tgt == src[::-1]
        assert all(0 <= t < 7 for t in src)


def test_splits_use_independent_streams():
    spec = T.SyntheticSeq2SeqSpec(n_train=30, n_val=30, n_test=30, seed=1)
    d = T.generate_seq2seq(spec)
    assert d["train"] != d["val"] != d["test"]
    other = T.generate_seq2seq(T.SyntheticSeq2SeqSpec(n_train=30, n_val=30, n_test=30, seed=2))
    assert other["train"] != d["train"]


def test_pairs_file_roundtrip(tmp_path):
    pairs = T.generate_seq2seq(T.SyntheticSeq2SeqSpec(n_train=5, n_val=1, n_test=1))["train"]
    path = tmp_path / "p.tsv"
    T.dump_pairs(pairs, path)
    assert T.load_pairs(path) == pairs
    path.write_text("1 2 3\n")
    with pytest.raises(ContractError, match="p.tsv:1"):
        T.load_pairs(path)


# -- batching ------------------------------------------------------------------------------


def test_make_batch_layout():
    b = T.make_batch([([0, 1], [1, 0]), ([2], [2])])
    assert b.src.tolist() == [[3, 4], [5, 0]]
    assert b.tgt_in.tolist() == [[T.BOS, 4, 3], [T.BOS, 5, 0]]
    assert b.tgt_out.tolist() == [[4, 3, T.EOS], [5, T.EOS, 0]]
    assert b.tgt_pad.tolist() == [[False, False, False], [False, False, True]]
    assert b.n_tokens == 5 and b.references == [[1, 0], [2]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 9), st.one_of(st.none(), st.integers(0, 99)))
def test_batcher_conserves_examples_and_tokens(seed, batch_size, order_seed):
    pairs = T.generate_seq2seq(T.SyntheticSeq2SeqSpec(min_len=1, max_len=6, n_train=23, n_val=1, n_test=1,
                                                      seed=seed))["train"]
    batches = T.batcher(pairs, batch_size, seed=order_seed)
    assert sum(len(b) for b in batches) == len(pairs)
    assert sum(b.n_tokens for b in batches) == sum(len(t) + 1 for _, t in pairs)
    seen = sorted(tuple(r) for b in batches for r in b.references)
    assert seen == sorted(tuple(t) for _, t in pairs)


def test_batcher_rejects_zero_batch():
    with pytest.raises(ConfigError, match="batch_size"):
        T.batcher([([1], [1])], 0)


# -- BLEU ---------------------------------------------------------------------------------


def test_bleu_self_match_is_100():
    refs = [[1, 2, 3, 4, 5], [6, 7, 8, 9]]
    assert T.bleu(refs, refs) == 100.0


def test_bleu_no_overlap_is_zero():
    assert T.bleu([[1, 2, 3, 4]], [[5, 6, 7, 8]]) == 0.0
    assert T.bleu([[]], [[1, 2]]) == 0.0


def test_bleu_hand_example():
    hyp = "the cat sat on the mat"
    ref = "the cat is on the mat"
    # precisions 5/6, (3+1)/(5+1), (1+1)/(4+1), (0+1)/(3+1); equal lengths so no penalty
    hand = 100 * (5 / 6 * 4 / 6 * 2 / 5 * 1 / 4) ** 0.25
    assert abs(T.bleu([hyp], [ref]) - hand) < 1e-9
    assert abs(T.bleu([hyp], [ref]) - brute_bleu([hyp.split()], [ref.split()])) < 1e-9


def test_bleu_brevity_penalty():
    got = T.bleu([[1, 2, 3]], [[1, 2, 3, 4, 5, 6]])
    full = 100 * (1.0 * 3 / 3 * 2 / 2 * 1 / 1) ** 0.25
    assert got == pytest.approx(full * math.exp(1 - 6 / 3), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.lists(st.integers(0, 4), max_size=8), st.lists(st.integers(0, 4), min_size=1, max_size=8)),
                min_size=1, max_size=5))
def test_bleu_matches_brute_force(corpus):
    hyps = [h for h, _ in corpus]
    refs = [r for _, r in corpus]
    got = T.bleu(hyps, refs)
    assert 0.0 <= got <= 100.0 + 1e-9
    if sum(map(len, hyps)) == 0:
        assert got == 0.0
    else:
        assert abs(got - brute_bleu(hyps, refs)) < 1e-9


def test_bleu_rejects_mismatched_corpus():
    with pytest.raises(ContractError):
        T.bleu([[1]], [])
    with pytest.raises(ContractError):
        T.bleu([], [])


# -- bits per character ---------------------------------------------------------------------


@pytest.mark.parametrize("v", [2, 256])
def test_uniform_model_bpc_is_log2_v(v):
    stream = np.random.default_rng(v).integers(0, v, size=1000)
    assert T.bits_per_character(T.UniformCharModel(v), stream) == math.log2(v)


class Oracle:
    """Knows the stream: puts all mass on the true next symbol."""

    def __init__(self, stream, v):
        self.stream, self.v = stream, v

    def next_char_log_probs(self, stream):
        out = np.full((len(stream), self.v), -np.inf)
        out[np.arange(len(stream)), self.stream] = 0.0
        return out


def test_oracle_model_has_zero_bpc():
    stream = np.array([1, 0, 3, 2, 2])
    assert T.bits_per_character(Oracle(stream, 4), stream) == 0.0


def test_bpc_errors():
    with pytest.raises(ContractError, match="empty"):
        T.bits_per_character(T.UniformCharModel(4), [])

    class Short:
        def next_char_log_probs(self, s):
            return np.zeros((1, 4))

    with pytest.raises(ContractError, match="rows"):
        T.bits_per_character(Short(), [1, 2])


def test_language_model_bpc_matches_direct_loss():
    spec = S.ModelSpec(d_model=16, heads=2, tgt_vocab=8, mode="lm", decoder_pattern="LL", seed=1, max_len=8)
    m = S.build_model(spec)
    stream = np.random.default_rng(0).integers(3, 8, size=8)
    inputs = np.concatenate([[T.BOS], stream[:-1]])[None]
    direct = float(m.loss(T.LmBatch(inputs, stream[None])).item()) / math.log(2)
    assert T.bits_per_character(m, stream) == pytest.approx(direct, rel=1e-12)


# -- character corpus --------------------------------------------------------------------------


def test_corpus_roundtrip_and_splits():
    text = T.synthetic_text(5000, seed=4)
    assert len(text) == 5000 and text == T.synthetic_text(5000, seed=4)
    c = T.CharLmCorpus.from_text(text)
    assert c.decode(c.data) == text
    sizes = [len(c.split(k)) for k in ("train", "val", "test")]
    assert sum(sizes) == 5000 and sizes[0] == 4500
    assert c.vocab_size == len(set(text.encode())) + T.OFFSET


def test_corpus_batches_are_shifted_windows():
    c = T.CharLmCorpus.from_text(T.synthetic_text(3000, seed=1))
    b = c.batches("train", 4, 16, np.random.default_rng(0))
    assert b.inputs.shape == b.targets.shape == (4, 16)
    assert np.array_equal(b.inputs[:, 1:], b.targets[:, :-1])
    with pytest.raises(ContractError, match="context"):
        c.batches("val", 2, 1000)


def test_toy_regression_teacher_shared_across_splits():
    xa, ya = T.make_toy_regression(50, noise=0.0, split="train")
    xb, yb = T.make_toy_regression(50, noise=0.0, split="val")
    assert not np.array_equal(xa, xb)
    again, _ = T.make_toy_regression(50, noise=0.0, split="train")
    assert np.array_equal(xa, again)
