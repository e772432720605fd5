import json

import pytest

from sgdpo.data import (
    DatasetError,
    PreferenceExample,
    SynthSpec,
    as_token_pairs,
    load_jsonl,
    resolve_rule,
    save_jsonl,
    sft_corpus,
    synth_dataset,
)
from sgdpo.model import ByteTokenizer
from sgdpo.subsequence import ConfigError


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


def test_empty_file(tmp_path):
    assert load_jsonl(write_lines(tmp_path / "e.jsonl", [])) == []


def test_valid_lines_in_order(tmp_path):
    rows = [{"prompt": f"p{i}", "chosen": f"c{i}", "rejected": f"r{i}"} for i in range(3)]
    ex = load_jsonl(write_lines(tmp_path / "ok.jsonl", [json.dumps(r) for r in rows]))
    assert [e.prompt for e in ex] == ["p0", "p1", "p2"]
    assert [e.line for e in ex] == [1, 2, 3]


def test_missing_field_names_line_and_field(tmp_path):
    path = write_lines(tmp_path / "bad.jsonl", [
        json.dumps({"prompt": "a", "chosen": "b", "rejected": "c"}),
        json.dumps({"prompt": "a", "rejected": "c"}),
    ])
    with pytest.raises(DatasetError) as info:
        load_jsonl(path)
    assert info.value.line == 2 and info.value.field == "chosen"
    assert "line 2" in str(info.value) and "chosen" in str(info.value)


def test_malformed_json_reports_line(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [json.dumps({"prompt": "", "chosen": "x", "rejected": "y"}), "{oops"])
    with pytest.raises(DatasetError, match="line 2"):
        load_jsonl(path)


def test_non_string_and_empty_fields(tmp_path):
    with pytest.raises(DatasetError, match="rejected"):
        load_jsonl(write_lines(tmp_path / "n.jsonl", [json.dumps({"prompt": "", "chosen": "x", "rejected": 3})]))
    with pytest.raises(DatasetError):
        PreferenceExample("p", "", "r")


@pytest.mark.parametrize("rule", ["a", "b"])
def test_synth_deterministic(rule):
    spec = SynthSpec(rule=rule, n_examples=30, seed=7)
    assert synth_dataset(spec) == synth_dataset(spec)
    assert synth_dataset(spec) != synth_dataset(SynthSpec(rule=rule, n_examples=30, seed=8))


def test_rule_a_shape():
    for e in synth_dataset(SynthSpec(rule="repeat_vs_noise", n_examples=50, seed=1)):
        assert set(e.chosen) == {e.prompt[-1]}
        assert 6 <= len(e.chosen) <= 10 and 6 <= len(e.rejected) <= 10


def test_rule_b_suffix_only():
    for e in synth_dataset(SynthSpec(rule="suffix", n_examples=50, suffix_k=2, seed=2)):
        assert len(e.chosen) == len(e.rejected)
        assert e.chosen[:-2] == e.rejected[:-2]
        assert all(a != b for a, b in zip(e.chosen[-2:], e.rejected[-2:]))


def test_unknown_rule_and_bad_ranges():
    with pytest.raises(ConfigError):
        SynthSpec(rule="zigzag")
    with pytest.raises(ConfigError):
        resolve_rule("c")
    with pytest.raises(ConfigError):
        SynthSpec(prompt_len=(0, 3))
    assert resolve_rule("b") == "suffix"


def test_round_trip_tokens(tmp_path):
    data = synth_dataset(SynthSpec(rule="b", n_examples=25, seed=3))
    back = load_jsonl(save_jsonl(data, tmp_path / "d.jsonl"))
    assert as_token_pairs(back) == as_token_pairs(data)


def test_unicode_round_trip(tmp_path):
    ex = [PreferenceExample("héllo ", "wörld", "✓")]
    back = load_jsonl(save_jsonl(ex, tmp_path / "u.jsonl"))
    assert back[0].tokenize() == ex[0].tokenize()


def test_tokenize_and_sft_corpus():
    tok = ByteTokenizer()
    ex = PreferenceExample("ab", "cc", "d")
    pair = ex.tokenize()
    assert pair.prompt == (97, 98) and pair.chosen == (99, 99, tok.vocab.eos_id)
    assert sft_corpus([ex]) == [(97, 98, 99, 99, tok.vocab.eos_id)]
