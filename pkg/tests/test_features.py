import pytest
from hypothesis import given
from hypothesis import strategies as st

from clinex.corpus import load_document
from clinex.errors import FormatError
from clinex.features import (
    LEXICON_NAMESPACES,
    WINDOW_NAMESPACES,
    WORD_NAMESPACES,
    Lexicon,
    extract_features,
    fallback_pos_tag,
    lexicon_lookup,
    unit_regex_features,
    word_shape,
)


def lex(entries):
    blank = {a: () for a in ("cui", "lui", "rel", "sty", "tty", "abr")}
    return Lexicon({k: {**blank, **{a: tuple(v) for a, v in attrs.items()}} for k, attrs in entries.items()})


def sentence(text):
    (sent,) = load_document(text, "d").sentences
    return sent


@pytest.mark.parametrize(
    "token, expected",
    [("BP", ("XX", "X")), ("10mg", ("ddxx", "dx")), ("T98.6", ("Xdd.d", "Xd.d")), ("a-b", ("x-x", "x-x"))],
)
def test_word_shape(token, expected):
    assert word_shape(token) == expected


@given(st.text(min_size=1, max_size=20))
def test_compressed_shape_has_no_repeats(token):
    _, compressed = word_shape(token)
    assert all(a != b for a, b in zip(compressed, compressed[1:]))


@pytest.mark.parametrize(
    "token, expected",
    [
        ("10mg", {"dosage"}),
        ("100MCG", {"dosage"}),
        ("500ml", {"dosage"}),
        ("120/80", {"blood-pressure"}),
        ("94%", {"percent"}),
        ("98.6F", {"temperature"}),
        ("38.5°C", {"temperature"}),
        ("12:30", {"time"}),
        ("pain", set()),
        ("mg", set()),
    ],
)
def test_unit_regexes(token, expected):
    assert unit_regex_features(token) == expected


class TestLexiconLookup:
    def test_phrase_match(self):
        out = lexicon_lookup(["chest", "pain"], lex({"chest pain": {"sty": ["sosy"]}}))
        assert out[0] == out[1] == {("umls-sty", "sosy")}

    def test_empty_lexicon(self):
        assert lexicon_lookup(["chest", "pain"], Lexicon({})) == [frozenset(), frozenset()]

    def test_longest_match_wins(self):
        out = lexicon_lookup(
            ["chest", "pain"], lex({"chest": {"sty": ["part"]}, "chest pain": {"sty": ["sosy"]}})
        )
        assert out == [{("umls-sty", "sosy")}] * 2

    def test_case_insensitive_and_unmatched(self):
        out = lexicon_lookup(["Denies", "CHEST", "pain", "today"], lex({"chest pain": {"cui": ["C1", "C2"]}}))
        assert out[0] == out[3] == frozenset()
        assert out[1] == {("umls-cui", "C1"), ("umls-cui", "C2")}

    def test_greedy_left_to_right(self):
        out = lexicon_lookup(["a", "b", "c"], lex({"a b": {"sty": ["x"]}, "b c": {"sty": ["y"]}}))
        assert out == [{("umls-sty", "x")}, {("umls-sty", "x")}, frozenset()]


class TestLexiconFile:
    def test_parse(self):
        lx = Lexicon.from_lines(["chest pain\tcui=C1,C2;lui=L1;rel=;sty=S1;tty=;abr="])
        assert lx.entries["chest pain"]["cui"] == ("C1", "C2")
        assert lx.entries["chest pain"]["rel"] == ()
        assert lx.max_phrase_len == 2

    def test_normalizes_phrase(self):
        lx = Lexicon.from_lines(["Chest   Pain\tsty=S1"])
        assert "chest pain" in lx.entries

    def test_bad_line(self):
        with pytest.raises(FormatError) as info:
            Lexicon.from_lines(["ok\tsty=a", "broken line"])
        assert info.value.lineno == 2

    def test_bad_attribute(self):
        with pytest.raises(FormatError):
            Lexicon.from_lines(["x\tcolor=red"])

    def test_dump_round_trip(self):
        sample = Lexicon.sample()
        assert Lexicon.from_lines(sample.dumps().splitlines()) == sample

    def test_sample_size(self):
        sample = Lexicon.sample()
        assert 90 <= len(sample.entries) <= 110
        assert sample.max_phrase_len >= 3


@pytest.mark.parametrize(
    "tokens, expected",
    [
        (["120/80"], ["NUM"]),
        (["."], ["PUNCT"]),
        (["running"], ["VERB"]),
        (["denied"], ["VERB"]),
        (["quickly"], ["ADV"]),
        (["nervous", "renal", "positive"], ["ADJ"] * 3),
        (["pain"], ["NOUN"]),
        (["°"], ["OTHER"]),
    ],
)
def test_fallback_pos(tokens, expected):
    assert fallback_pos_tag(tokens) == expected


class TestExtractFeatures:
    def test_single_token(self):
        (fv,) = extract_features(sentence("mi"), Lexicon({}))
        for feat in [
            ("unigram", "mi"),
            ("last2", "mi"),
            ("shape-full", "xx"),
            ("shape-compressed", "x"),
            ("len", "2"),
            ("pos", "NOUN"),
            ("prev3-1", "<s>"),
            ("prev3-3", "<s>"),
            ("next3-1", "</s>"),
            ("prev1:boundary", "<s>"),
            ("next1:boundary", "</s>"),
        ]:
            assert feat in fv

    def test_namespaces_closed(self):
        fvs = extract_features(sentence("Pt given Lasix 40mg for chest pain ."), Lexicon.sample())
        allowed = set(WORD_NAMESPACES) | set(WINDOW_NAMESPACES)
        allowed |= {f"{p}:{ns}" for p in ("prev1", "next1") for ns in WORD_NAMESPACES}
        allowed |= {"prev1:boundary", "next1:boundary"}
        for fv in fvs:
            assert {ns for ns, _ in fv} <= allowed

    def test_no_nested_context(self):
        for fv in extract_features(sentence("a b c d"), Lexicon({})):
            for ns, _ in fv:
                assert ns.count("prev1:") + ns.count("next1:") <= 1

    def test_identical_neighbours(self):
        fvs = extract_features(sentence("pain pain"), Lexicon({}))
        word_level = {(ns, v) for ns, v in fvs[1] if ns in WORD_NAMESPACES}
        nxt = {(ns[len("next1:"):], v) for ns, v in fvs[0] if ns.startswith("next1:")}
        assert nxt == word_level

    def test_lexicon_features_present(self):
        fvs = extract_features(sentence("denies chest pain"), Lexicon.sample())
        assert ("umls-sty", "sosy") in fvs[1] and ("umls-sty", "sosy") in fvs[2]
        assert not any(ns in LEXICON_NAMESPACES for ns, _ in fvs[0])

    def test_length_bucket(self):
        fvs = extract_features(sentence("a abcdef abcdefghij"), Lexicon({}))
        assert ("len", "1") in fvs[0] and ("len", "6+") in fvs[1] and ("len", "6+") in fvs[2]

    def test_window(self):
        fvs = extract_features(sentence("a b c d e"), Lexicon({}))
        assert {("prev3-1", "b"), ("prev3-2", "a"), ("prev3-3", "<s>")} <= fvs[2]
        assert {("next3-1", "d"), ("next3-2", "e"), ("next3-3", "</s>")} <= fvs[2]

    def test_precomputed_pos(self):
        fvs = extract_features(sentence("a b"), Lexicon({}), pos_tags=["DT", "NN"])
        assert ("pos", "DT") in fvs[0] and ("next1:pos", "NN") in fvs[0]
        with pytest.raises(ValueError):
            extract_features(sentence("a b"), Lexicon({}), pos_tags=["DT"])

    def test_pluggable_tagger(self):
        class Upper:
            def tag(self, tokens):
                return ["X"] * len(tokens)

        fvs = extract_features(sentence("a b"), Lexicon({}), pos_tagger=Upper())
        assert ("pos", "X") in fvs[1]


@given(st.lists(st.sampled_from(["pain", "10mg", "Chest", "120/80", ".", "x-ray", "a"]), min_size=1, max_size=10))
def test_neighbour_blocks_mirror_word_level(words):
    fvs = extract_features(words, Lexicon.sample())
    word_level = [{f for f in fv if f[0] in WORD_NAMESPACES} for fv in fvs]
    for i, fv in enumerate(fvs):
        prev = {(ns[6:], v) for ns, v in fv if ns.startswith("prev1:") and ns != "prev1:boundary"}
        nxt = {(ns[6:], v) for ns, v in fv if ns.startswith("next1:") and ns != "next1:boundary"}
        assert prev == (word_level[i - 1] if i > 0 else set())
        assert nxt == (word_level[i + 1] if i + 1 < len(fvs) else set())
    # bounded size independent of sentence length
    assert max(len(fv) for fv in fvs) < 3 * 40 + 6


def test_position_equivariance():
    doc = load_document("chest pain noted\nLasix 40mg given\n", "d")
    swapped = load_document("Lasix 40mg given\nchest pain noted\n", "d")
    lx = Lexicon.sample()
    assert extract_features(doc.sentences[0], lx) == extract_features(swapped.sentences[1], lx)
