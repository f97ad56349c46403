import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mg2p.data import (
    BOS_ID,
    EOS_ID,
    UNK_ID,
    DataError,
    Dataset,
    LanguageRegistry,
    ParseError,
    PronunciationEntry,
    Vocabulary,
    build_vocabulary,
    format_prediction_tsv,
    parse_prediction_tsv,
    parse_wikipron_tsv,
    prepend_language_tag,
    write_tsv,
)


def entry(lang, word, phones):
    return PronunciationEntry.from_strings(lang, word, phones)


def test_parse_published_sample():
    (e,) = parse_wikipron_tsv("vêtu\tv e t y\n", "fre")
    assert e == PronunciationEntry("fre", ("v", "ê", "t", "u"), ("v", "e", "t", "y"))


def test_parse_normalizes_to_nfc():
    decomposed = "vêtu"
    (e,) = parse_wikipron_tsv(f"{decomposed}\tv e t y", "fre")
    assert e.source == ("v", "ê", "t", "u")


def test_parse_empty():
    assert parse_wikipron_tsv("", "fre") == []


def test_parse_preserves_order():
    text = "b\tb\na\ta\nc\tk\n"
    assert [e.word for e in parse_wikipron_tsv(text, "dut")] == ["b", "a", "c"]


@pytest.mark.parametrize(
    "text, line",
    [
        ("front v e", 1),
        ("ok\to k\nfront\tf\tr", 2),
        ("\tv e", 1),
        ("word\t", 1),
        ("word\tv  e", 1),
    ],
)
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as exc:
        parse_wikipron_tsv(text, "fre")
    assert exc.value.line == line


def test_bad_language_code():
    with pytest.raises(DataError):
        parse_wikipron_tsv("a\ta", "FR")
    with pytest.raises(DataError):
        entry("fren", "a", "a")


def test_registry_accepts_new_codes():
    reg = LanguageRegistry()
    assert "fre" in reg and len(reg) == 15
    reg.register("xyz")
    assert "xyz" in reg
    with pytest.raises(DataError):
        reg.register("x1z")


def test_write_tsv_join_rule():
    assert write_tsv([]) == ""
    out = write_tsv([entry("fre", "vêtu", "v e t")])
    assert out == "vêtu\tv e t\n"
    assert out.split("\t")[1].count(" ") == 2


graphemes = st.characters(blacklist_categories=("Cs", "Cc", "Zs", "Zl", "Zp", "Mn", "Mc", "Me"))
phoneme = st.text(st.characters(blacklist_categories=("Cs", "Cc", "Zs", "Zl", "Zp")), min_size=1, max_size=3).filter(
    lambda s: not any(c.isspace() for c in s)
)


@st.composite
def entries(draw):
    lang = draw(st.sampled_from(["fre", "hun", "kor", "hin"]))
    word = draw(st.text(graphemes, min_size=1, max_size=8).filter(lambda w: not any(c.isspace() for c in w)))
    target = draw(st.lists(phoneme, min_size=1, max_size=8))
    return PronunciationEntry.from_strings(lang, word, " ".join(target))


@settings(max_examples=200, deadline=None)
@given(st.lists(entries(), max_size=10))
def test_tsv_round_trip(es):
    by_lang = {}
    for e in es:
        by_lang.setdefault(e.lang, []).append(e)
    for lang, group in by_lang.items():
        assert parse_wikipron_tsv(write_tsv(group), lang) == group


def test_prepend_language_tag():
    src, _ = build_vocabulary([Dataset([entry("fre", "front", "f ʁ ɔ̃"), entry("hun", "ő", "øː")], "train")])
    e = entry("fre", "front", "f ʁ ɔ̃")
    assert prepend_language_tag(e, src) == ["<fre>", "f", "r", "o", "n", "t"]
    assert e.source == tuple("front")
    one = entry("hun", "ő", "øː")
    assert prepend_language_tag(one, src) == ["<hun>", "ő"]
    with pytest.raises(DataError):
        prepend_language_tag(entry("xxx", "a", "a"), src)


def test_vocabulary_layout_and_determinism():
    data = [entry("fre", "ab", "a b"), entry("dut", "ba", "b a"), entry("fre", "ca", "k a")]
    src, tgt = build_vocabulary([Dataset(data, "train")])
    assert src.id_to_token[:4] == ("<pad>", "<s>", "</s>", "<unk>")
    assert src.id_to_token[4:6] == ("<dut>", "<fre>")
    assert src.id_to_token[6:] == ("a", "b", "c")
    assert tgt.id_to_token[4:] == ("a", "b", "k")
    assert src.id_to_token.count("a") == 1
    shuffled = data[:]
    random.Random(3).shuffle(shuffled)
    again = build_vocabulary([Dataset(shuffled, "train")])
    assert again[0].id_to_token == src.id_to_token and again[1].id_to_token == tgt.id_to_token
    assert again[0].fingerprint() == src.fingerprint()


def test_vocabulary_bijection_and_dense_ids():
    src, _ = build_vocabulary([Dataset([entry("fre", "abc", "a")], "train")])
    assert sorted(src.token_to_id.values()) == list(range(len(src)))
    assert all(src.id_to_token[i] == t for t, i in src.token_to_id.items())


def test_fifteen_language_tags():
    from mg2p.data import SHARED_TASK_LANGUAGES

    data = [entry(c, "a", "a") for c in SHARED_TASK_LANGUAGES]
    src, _ = build_vocabulary([Dataset(data, "train")])
    assert len(src.lang_tags) == 15
    assert sum(1 for t in src.id_to_token if t.startswith("<") and t[1:4] in SHARED_TASK_LANGUAGES) == 15


def test_vocabulary_needs_train_split():
    with pytest.raises(DataError):
        build_vocabulary([Dataset([entry("fre", "a", "a")], "dev")])


def test_encode_decode():
    src, tgt = build_vocabulary([Dataset([entry("fre", "abc", "a b")], "train")])
    toks = ["a", "b", "c"]
    assert src.decode(src.encode(toks)) == toks
    assert src.encode(["ß"]) == [UNK_ID]
    assert src.encode([], add_bos_eos=True) == [BOS_ID, EOS_ID]


def test_vocabulary_text_round_trip():
    src, _ = build_vocabulary([Dataset([entry("fre", "abc", "a b"), entry("kor", "개", "k ɛ")], "train")])
    back = Vocabulary.from_text(src.to_text())
    assert back.id_to_token == src.id_to_token
    assert back.lang_tags == src.lang_tags
    assert back.fingerprint() == src.fingerprint()


def test_silver_flag_counts():
    ds = Dataset([entry("fre", "a", "a"), PronunciationEntry("fre", ("b",), ("b",), silver=True)], "train")
    assert ds.counts() == {"gold": 1, "silver": 1}
    with pytest.raises(DataError):
        Dataset([], "holdout")


def test_prediction_tsv():
    text = format_prediction_tsv([("vêtu", ("v", "e", "t", "y"), 0.87654)])
    assert text == "vêtu\tv e t y\t0.8765\n"
    assert parse_prediction_tsv(text) == [("vêtu", ("v", "e", "t", "y"), 0.8765)]
