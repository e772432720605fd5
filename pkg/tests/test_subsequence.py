import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgdpo import model as m
from sgdpo.subsequence import ConfigError, SpanMode, build_spans, pilot_trace, span_length, span_seed


def test_length_uses_common_length():
    s = build_spans(10, 8, 0.6, 0.6, rng_seed=0)
    assert s.len_w == 4 and s.len_l == 4


def test_full_ratio_on_unequal_lengths():
    starts = set()
    for seed in range(200):
        s = build_spans(10, 8, 1.0, 1.0, SpanMode.DIFFERENT_INDEX, seed)
        assert s.len_w == s.len_l == 8
        assert s.start_l == 0
        starts.add(s.start_w)
    assert starts == {0, 1, 2}


def test_equal_lengths_full_ratio_same_index_is_whole_sequence():
    for seed in range(20):
        s = build_spans(7, 7, 1.0, 1.0, SpanMode.SAME_INDEX, seed)
        assert s.chosen == (0, 7) and s.rejected == (0, 7)


def test_floor_guard():
    assert span_length(0.7, 10) == 7
    assert span_length(0.6, 5) == 3
    assert span_length(0.01, 5) == 1


@pytest.mark.parametrize("r", [0.0, -0.1, 1.01, float("nan")])
def test_bad_ratio(r):
    with pytest.raises(ConfigError):
        build_spans(5, 5, r, 0.5)


def test_mode_parsing():
    assert SpanMode.parse("same") is SpanMode.SAME_INDEX
    assert SpanMode.parse("D") is SpanMode.DIFFERENT_INDEX
    with pytest.raises(ConfigError):
        SpanMode.parse("both")


def test_start_uniformity():
    counts = np.zeros(20 - 12 + 1)
    for seed in range(10_000):
        s = build_spans(20, 20, 0.6, 0.6, SpanMode.DIFFERENT_INDEX, seed)
        counts[s.start_w] += 1
    expected = 10_000 / len(counts)
    assert np.all(np.abs(counts - expected) <= 0.2 * expected)


def test_determinism_and_epoch_seeds():
    assert build_spans(15, 11, 0.7, 0.8, rng_seed=3) == build_spans(15, 11, 0.7, 0.8, rng_seed=3)
    assert span_seed(0, 1, 0) != span_seed(0, 1, 1) != span_seed(0, 2, 1)


@given(
    st.integers(1, 40),
    st.integers(1, 40),
    st.floats(0.01, 1.0),
    st.floats(0.01, 1.0),
    st.sampled_from(list(SpanMode)),
    st.integers(0, 2**31),
)
def test_invariants(lc, lr, r1, r2, mode, seed):
    s = build_spans(lc, lr, r1, r2, mode, seed)
    common = min(lc, lr)
    assert 1 <= s.len_w <= common and 1 <= s.len_l <= common
    assert s.start_w >= 0 and s.start_w + s.len_w <= lc
    assert s.start_l >= 0 and s.start_l + s.len_l <= lr
    if mode is SpanMode.SAME_INDEX:
        assert s.start_w == s.start_l
        if lc == lr and r1 == r2:
            assert s.chosen == s.rejected


CFG = m.ModelConfig(vocab=m.Vocab.small(6), d_model=8, n_layers=1, n_heads=2, d_ff=16, max_context=32)


def test_pilot_trace_identities():
    pol = m.init_params(CFG, 0, init_std=0.5)
    ref = m.init_params(CFG, 1, init_std=0.5)
    prompt, resp = [1, 2], [0, 3, 4, 5, 1, 2]
    tp, tr = m.seq_logprob(pol, prompt, resp), m.seq_logprob(ref, prompt, resp)
    full = tp.total_logprob - tr.total_logprob
    assert pilot_trace(tp, tr, (0, 6)) == pytest.approx(full, abs=1e-12)
    assert pilot_trace(tp, tp, (1, 3)) == 0.0
    span = pilot_trace(tp, tr, (2, 3))
    d = tp.per_token_logprob - tr.per_token_logprob
    complement = d[:2].sum() + d[5:].sum()
    assert abs(full - span - complement) < 1e-10


def test_pilot_trace_length_mismatch():
    pol = m.init_params(CFG, 0)
    a, b = m.seq_logprob(pol, [1], [2, 3]), m.seq_logprob(pol, [1], [2, 3, 4])
    with pytest.raises(m.InputError):
        pilot_trace(a, b, (0, 1))
