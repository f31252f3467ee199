import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdmdesk.errors import ConfigError, DataError
from fdmdesk.textbpe import TextTokenizer, train_text_tokenizer


def test_byte_fallback_ids():
    tok = TextTokenizer([])
    assert tok.tokenize("abc") == [97, 98, 99]
    assert tok.detokenize([97, 98, 99]) == "abc"


def test_worked_training_example():
    tok = train_text_tokenizer(["aaaa"], 260)
    assert b"aa" in tok.vocab.values()


def test_merge_requires_pair_count_two():
    # every pair unique -> no merges regardless of budget
    tok = train_text_tokenizer(["abcdef"], 300)
    assert tok.merges == []


def test_deterministic_tie_break():
    # "ab" and "cd" both occur twice; (97, 98) < (99, 100) lexicographically
    tok = train_text_tokenizer(["abxcdxabycdy"], 257)
    assert tok.merges[0] == (97, 98)


def test_vocab_size_limits():
    with pytest.raises(ConfigError):
        train_text_tokenizer(["hi"], 255)
    with pytest.raises(ConfigError):
        train_text_tokenizer(["hi"], 32001)


def test_artifact_round_trip(tmp_path):
    tok = train_text_tokenizer(["go to the red key", "go to the blue ball"], 300)
    path = tmp_path / "tok.json"
    tok.save(path)
    tok2 = TextTokenizer.load(path)
    assert tok2.merges == tok.merges
    msg = "go to the red ball"
    assert tok2.tokenize(msg) == tok.tokenize(msg)


def test_artifact_rejects_wrong_format(tmp_path):
    path = tmp_path / "tok.json"
    path.write_text(json.dumps({"format": "other", "version": 1, "merges": []}))
    with pytest.raises(DataError):
        TextTokenizer.load(path)


def test_longest_merge_applied():
    tok = train_text_tokenizer(["the the the the"], 300)
    ids = tok.tokenize("the the")
    assert len(ids) < len("the the")
    assert tok.detokenize(ids) == "the the"


@settings(max_examples=50)
@given(st.text(min_size=0, max_size=60))
def test_round_trip_any_text(s):
    tok = train_text_tokenizer(["go to the red key and the blue ball"], 320)
    assert tok.detokenize(tok.tokenize(s)) == s


@given(st.lists(st.sampled_from(["go", "to", "the", "red", "key", " "]), max_size=12))
def test_round_trip_corpus_text(words):
    tok = train_text_tokenizer(["go to the red key"], 300)
    s = "".join(words)
    assert tok.detokenize(tok.tokenize(s)) == s
