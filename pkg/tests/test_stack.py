import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reservoir_transformers import autodiff as ad
from reservoir_transformers import stack as S
from reservoir_transformers.errors import ConfigError
from reservoir_transformers.tasks import make_batch, model_vocab_size
from oracles import non_adjacent_exists


def small_spec(**kw):
    base = dict(d_model=16, heads=2, src_vocab=model_vocab_size(8), tgt_vocab=model_vocab_size(8),
                encoder_pattern="LLRLRLLL", decoder_pattern=1, seed=3, max_len=16)
    base.update(kw)
    return S.ModelSpec(**base)


def toy_batch():
    return make_batch([([1, 2, 3], [1, 2, 3]), ([4, 5], [4, 5]), ([6, 7, 0, 1], [6, 7, 0, 1])])


# -- placement ------------------------------------------------------------------------------


@pytest.mark.parametrize("n,k,expected", [
    (7, 3, "LRLRLRL"),
    (7, 2, "LLRLRLL"),
    (8, 2, "LLRLRLLL"),
    (6, 0, "LLLLLL"),
])
def test_alternating_middle_examples(n, k, expected):
    assert str(S.place_reservoirs(n, k, "alternating_middle")) == expected


@pytest.mark.parametrize("strategy,expected", [
    ("bottom", "RRLLLLL"),
    ("top", "LLLLLRR"),
    ("middle", "LLRRLLL"),
])
def test_contiguous_strategies(strategy, expected):
    assert str(S.place_reservoirs(7, 2, strategy)) == expected


def test_zero_reservoirs_for_every_strategy():
    for strategy in S.STRATEGIES:
        assert str(S.place_reservoirs(6, 0, strategy)) == "LLLLLL"


@pytest.mark.parametrize("k", [4, 5])
def test_at_least_one_readout_must_remain(k):
    with pytest.raises(ConfigError, match="n_reservoir"):
        S.place_reservoirs(4, k)


def test_alternating_needs_room_for_gaps():
    with pytest.raises(ConfigError, match="non-adjacent"):
        S.place_reservoirs(5, 4)
    assert not non_adjacent_exists(5, 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 16).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1))),
       st.sampled_from(S.STRATEGIES))
def test_placement_count_and_adjacency(nk, strategy):
    n, k = nk
    if strategy == "alternating_middle" and 2 * k - 1 > n:
        with pytest.raises(ConfigError):
            S.place_reservoirs(n, k, strategy)
        return
    s = str(S.place_reservoirs(n, k, strategy))
    assert len(s) == n and s.count("R") == k
    if strategy == "alternating_middle":
        assert "RR" not in s
        # centred with left bias
        first, last = s.find("R"), s.rfind("R")
        if k:
            assert 0 <= (n - 1 - last) - first <= 1


@pytest.mark.parametrize("n", range(1, 11))
def test_feasibility_matches_brute_force(n):
    for k in range(n):
        feasible = math.comb(n - k + 1, k) > 0
        assert feasible == non_adjacent_exists(n, k) == (2 * k - 1 <= n)


def test_pattern_parse_and_print_roundtrip():
    p = S.StackPattern.parse("LLRLRLL", kind="bigru_reservoir")
    assert str(p) == "LLRLRLL" and p.n_frozen == 2
    assert p.slots[2].kind == "bigru_reservoir" and p.slots[0].kind == "transformer"
    assert str(p.unfrozen()) == "LLLLLLL"
    with pytest.raises(ConfigError):
        S.StackPattern.parse("LLX")
    with pytest.raises(ConfigError, match="readout"):
        S.StackPattern.parse("RRR")


# -- models --------------------------------------------------------------------------------


def test_build_is_deterministic():
    a, b = S.build_model(small_spec()), S.build_model(small_spec())
    for (ka, ta), (kb, tb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert ka == kb and np.array_equal(ta.data, tb.data)


def test_frozen_slots_report_frozen():
    m = S.build_model(small_spec())
    assert [l.frozen for l in m.encoder] == [c == "R" for c in "LLRLRLLL"]
    assert not any(l.frozen for l in m.decoder)


def test_decoder_reservoirs_rejected_in_seq2seq():
    with pytest.raises(ConfigError, match="decoder_pattern"):
        small_spec(decoder_pattern="LR")


def test_frozen_layers_rebuild_from_seed():
    spec = small_spec(encoder_pattern="LRLRL", reservoir_kind="conv_reservoir")
    m = S.build_model(spec)
    for i, layer in enumerate(m.encoder):
        rebuilt = S.build_layer(spec, "encoder", i)
        for k, t in layer.named_parameters().items():
            assert np.array_equal(t.data, rebuilt.named_parameters()[k].data)


@pytest.mark.parametrize("kind", ["ffn_reservoir", "bigru_reservoir", "conv_reservoir"])
def test_freezing_changes_no_output_at_init(kind):
    frozen = S.build_model(small_spec(reservoir_kind=kind))
    spec = small_spec(reservoir_kind=kind)
    spec.encoder_pattern = spec.encoder_pattern.unfrozen()
    trainable = S.build_model(spec)
    batch = toy_batch()
    with ad.no_grad():
        assert np.array_equal(frozen.logits(batch).data, trainable.logits(batch).data)


def test_seq2seq_loss_ignores_padding():
    m = S.build_model(small_spec())
    pairs = [([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]), ([6, 7], [6, 7])]
    padded_sum, n = m.nll_sum(make_batch(pairs))
    singles = [m.nll_sum(make_batch([p])) for p in pairs]
    assert n == sum(c for _, c in singles)
    assert padded_sum == pytest.approx(sum(s for s, _ in singles), rel=1e-10)


def test_greedy_decode_shapes():
    m = S.build_model(small_spec())
    out = m.greedy_decode(toy_batch())
    assert len(out) == 3 and all(isinstance(t, int) for row in out for t in row)


def test_language_model_is_causal():
    spec = S.ModelSpec(d_model=16, heads=2, tgt_vocab=10, mode="lm", decoder_pattern="LRL", seed=0, max_len=12)
    m = S.build_model(spec)
    ids = np.array([[3, 4, 5, 6, 7]])
    base = m.hidden(ids).data
    changed = ids.copy()
    changed[0, 3] = 9
    out = m.hidden(changed).data
    assert np.array_equal(out[0, :3], base[0, :3])
    assert not np.array_equal(out[0, 3:], base[0, 3:])


def test_language_model_rejects_bidirectional_reservoirs():
    with pytest.raises(ConfigError):
        S.build_model(S.ModelSpec(d_model=16, heads=2, mode="lm", decoder_pattern="LRL",
                                  reservoir_kind="bigru_reservoir"))


def test_spec_validation_names_fields():
    with pytest.raises(ConfigError, match="heads"):
        small_spec(heads=3)
    with pytest.raises(ConfigError, match="mode"):
        small_spec(mode="bert")
    with pytest.raises(ConfigError, match="d_model"):
        small_spec(d_model=0)


# -- census ---------------------------------------------------------------------------------


def test_census_no_frozen_and_additivity():
    spec = small_spec(encoder_pattern="LLLL")
    c = S.param_census(S.build_model(spec))
    assert c["trainable"] == c["total"]
    assert c["total"] == c["other"] + sum(r["params"] for r in c["per_layer"])


@pytest.mark.parametrize("kind", ["transformer", "ffn_reservoir", "bigru_reservoir", "conv_reservoir"])
def test_census_freezing_k_layers(kind):
    pattern = S.StackPattern((S.Slot(kind, f) for f in (False, True, False, True, False)))
    m = S.build_model(small_spec(encoder_pattern=pattern))
    c = S.param_census(m)
    per = m.encoder[1].num_parameters()
    assert c["total"] - c["trainable"] == 2 * per


def test_census_matches_table_shape():
    """8 layers with 2 transformer reservoirs: trainable of a 6-layer model, total of an 8-layer one."""
    frozen8 = S.StackPattern([S.Slot("transformer", c == "R") for c in "LLRLRLLL"])
    c8r = S.param_census(S.build_model(small_spec(encoder_pattern=frozen8)))
    c8 = S.param_census(S.build_model(small_spec(encoder_pattern="LLLLLLLL")))
    c6 = S.param_census(S.build_model(small_spec(encoder_pattern="LLLLLL")))
    assert c8r["total"] == c8["total"]
    assert c8r["trainable"] == c6["trainable"]


def test_toy_regressor_triplet_and_frozen_middle():
    m = S.ToyRegressor(seed=0)
    assert m.backskip_triplet() == (0, 1, 2)
    assert [l.frozen for l in m.layers] == [False, True, False]
    with pytest.raises(ConfigError):
        S.ToyRegressor(frozen_middle=False).backskip_triplet()


def test_parameters_are_c_contiguous():
    """BLAS rounding depends on layout; frozen weights must not keep a transposed view."""
    for kind in ("transformer", "ffn_reservoir", "bigru_reservoir", "conv_reservoir"):
        m = S.build_model(small_spec(reservoir_kind=kind))
        assert all(t.data.flags["C_CONTIGUOUS"] for t in m.parameters())
