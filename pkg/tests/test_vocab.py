import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifelong_mnmt.vocab import (
    RESERVED,
    UNK,
    UNK_ID,
    RankMapping,
    Vocabulary,
    VocabError,
    add_indicator,
    apply_mapping,
    build_rank_mapping,
    build_vocab,
    decode,
    encode,
    indicator_token,
    strip_indicator,
    union_vocab,
    unk_rate,
)

words = st.sampled_from([f"w{i}" for i in range(12)])
corpora = st.lists(st.lists(words, min_size=1, max_size=6), min_size=0, max_size=12)


def test_build_vocab_tie_break():
    v = build_vocab([["a", "a", "b"], ["a", "c"]], 10)
    assert v.ranked_tokens == ["a", "b", "c"]
    assert [v.count(t) for t in v.ranked_tokens] == [3, 1, 1]
    assert v.tokens[:4] == list(RESERVED)


def test_build_vocab_truncates():
    v = build_vocab([["a", "a", "b"], ["a", "c"]], 2)
    assert v.ranked_tokens == ["a", "b"]


def test_empty_corpus_gives_reserved_only():
    v = build_vocab([], 5)
    assert v.tokens == list(RESERVED)
    assert v.content_size == 0


@given(corpora, st.integers(0, 15))
def test_build_is_deterministic_and_sorted(corpus, size):
    v1, v2 = build_vocab(corpus, size), build_vocab(list(reversed(corpus)), size)
    assert v1 == v2
    keys = [(-v1.count(t), t) for t in v1.ranked_tokens]
    assert keys == sorted(keys)
    assert v1.content_size <= size


def test_union_append_only():
    old = build_vocab([["a", "a", "b"]], 10)
    task = build_vocab([["b", "b", "b", "c"]], 10)
    u = union_vocab(old, task)
    assert u.tokens == list(RESERVED) + ["a", "b", "c"]
    assert u.count("b") == 3  # merged by max


def test_union_subset_is_identity():
    old = build_vocab([["a", "a", "b", "c"]], 10)
    task = build_vocab([["c", "a"]], 10)
    u = union_vocab(old, task, lang=old.lang)
    assert u.tokens == old.tokens


def test_union_with_empty_old_follows_task_ranks():
    task = build_vocab([["z", "y", "y"]], 10)
    u = union_vocab(build_vocab([], 10), task)
    assert u.ranked_tokens == ["y", "z"]


@given(corpora, corpora)
def test_union_preserves_old_indices(c1, c2):
    old, task = build_vocab(c1, 8), build_vocab(c2, 8)
    u = union_vocab(old, task)
    for t in old.tokens:
        assert u.index(t) == old.index(t)
    assert set(u.tokens) == set(old.tokens) | set(task.tokens)


def test_encode_unknown_to_unk():
    v = build_vocab([["a", "b"]], 10)
    assert encode(["a", "zz"], v) == [v.index("a"), UNK_ID]
    assert decode([UNK_ID], v) == [UNK]


def test_decode_out_of_range():
    v = build_vocab([["a"]], 10)
    with pytest.raises(VocabError, match="5"):
        decode([len(v)], v)


@given(corpora)
def test_encode_decode_roundtrip(corpus):
    v = build_vocab(corpus, 100)
    for s in corpus:
        assert decode(encode(s, v), v) == s


def test_add_indicator_example():
    s = "you probably saw it on the news .".split()
    assert add_indicator(s, "en", "it") == ["<en2it>"] + s
    assert add_indicator([], "en", "it") == ["<en2it>"]
    with pytest.raises(VocabError):
        add_indicator(add_indicator(s, "en", "it"), "en", "it")


def test_indicator_registered_as_reserved():
    v = build_vocab([["a"]], 10)
    add_indicator(["a"], "en", "it", v)
    assert "<en2it>" in v and v.indicators == ["<en2it>"]
    assert v.ranked_tokens == ["a"]
    assert strip_indicator(["<en2it>", "a"]) == ["a"]


def test_rank_mapping_examples():
    v_new = Vocabulary("x", list(RESERVED) + ["x1", "x2", "x3"], [0] * 4 + [3, 2, 1])
    v_old = Vocabulary("y", list(RESERVED) + ["y1", "y2", "y3"], [0] * 4 + [3, 2, 1])
    m = build_rank_mapping(v_new, v_old)
    assert m.pairs == {"x1": "y1", "x2": "y2", "x3": "y3"}
    short = Vocabulary("y", list(RESERVED) + ["y1", "y2"], [0] * 4 + [3, 2])
    assert build_rank_mapping(v_new, short).pairs["x3"] == UNK
    assert build_rank_mapping(v_old, v_old).pairs == {t: t for t in v_old.ranked_tokens}


def test_indicators_excluded_from_mapping():
    v = build_vocab([["a", "a", "b"]], 10)
    v.add_reserved("<q2r>")
    assert "<q2r>" not in build_rank_mapping(v, v).pairs


@settings(max_examples=60)
@given(corpora, corpora)
def test_rank_mapping_rank_preserving_and_injective(c1, c2):
    v_new, v_old = build_vocab(c1, 20, "n"), build_vocab(c2, 20, "o")
    m = build_rank_mapping(v_new, v_old)
    shared = min(v_new.content_size, v_old.content_size)
    images = [m(t) for t in v_new.ranked_tokens[:shared]]
    assert len(set(images)) == len(images)
    for t in v_new.ranked_tokens[:shared]:
        assert v_old.rank(m(t)) == v_new.rank(t)
    for t in v_new.ranked_tokens[shared:]:
        assert m(t) == UNK


def test_apply_mapping():
    m = RankMapping("x", "y", {"x1": "y1", "x2": "y2"})
    assert apply_mapping(["x2", "x1"], m) == ["y2", "y1"]
    assert apply_mapping(["x9"], m) == [UNK]
    assert apply_mapping(["x1"], m, indicator=indicator_token("y", "en")) == ["<y2en>", "y1"]


@given(st.lists(st.sampled_from(["x1", "x2", "x3", "q"]), max_size=10))
def test_apply_mapping_preserves_length(sentence):
    m = RankMapping("x", "y", {"x1": "y1", "x2": "y2"})
    assert len(apply_mapping(sentence, m)) == len(sentence)


def test_unk_rate():
    v = build_vocab([["a"]], 10)
    assert unk_rate([["a", "b"], ["c", "a"]], v) == 0.5


def test_vocab_and_mapping_files_roundtrip(tmp_path):
    v = build_vocab([["a", "a", "b"]], 10, "xx")
    v.add_reserved("<xx2yy>")
    v.save(tmp_path / "v")
    assert Vocabulary.load(tmp_path / "v", "xx") == v
    m = build_rank_mapping(v, v)
    m.save(tmp_path / "m")
    assert RankMapping.load(tmp_path / "m", "xx", "xx") == m


def test_vocab_rejects_bad_layout():
    with pytest.raises(VocabError):
        Vocabulary("x", ["a", "b", "c", "d"], [0, 0, 0, 0])
    with pytest.raises(VocabError):
        Vocabulary("x", list(RESERVED) + ["a", "a"], [0] * 6)
