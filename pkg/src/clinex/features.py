"""Per-token indicator features for the CRF tagger.

Each token yields a set of ``(namespace, value)`` pairs. The word-level
namespaces describe the token itself; the context namespaces add the three
surrounding unigrams on each side and a copy of every word-level feature of
the immediate neighbours under a ``prev1:`` / ``next1:`` prefix.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Protocol, Sequence, Tuple

from clinex.corpus import Sentence
from clinex.errors import FormatError

Feature = Tuple[str, str]
FeatureVector = FrozenSet[Feature]

LEXICON_ATTRIBUTES = ("cui", "lui", "rel", "sty", "tty", "abr")
LEXICON_NAMESPACES = tuple(f"umls-{a}" for a in LEXICON_ATTRIBUTES)
WORD_NAMESPACES = (
    "unigram",
    "last2",
    "shape-full",
    "shape-compressed",
    "pos",
    "unit",
    "len",
) + LEXICON_NAMESPACES
WINDOW_NAMESPACES = tuple(f"prev3-{i}" for i in (1, 2, 3)) + tuple(f"next3-{i}" for i in (1, 2, 3))
BOS, EOS = "<s>", "</s>"

UNIT_PATTERNS = {
    "dosage": re.compile(r"\d+(?:\.\d+)?(?:mg|mcg|g|ml)", re.IGNORECASE),
    "percent": re.compile(r"\d+(?:\.\d+)?%"),
    "temperature": re.compile(r"\d+\.?\d*°?[fc]", re.IGNORECASE),
    "blood-pressure": re.compile(r"\d+/\d+"),
    "time": re.compile(r"\d+:\d+"),
}

POS_TAGSET = ("NOUN", "VERB", "ADJ", "ADV", "NUM", "PUNCT", "OTHER")


def word_shape(token_text: str) -> Tuple[str, str]:
    """Full and run-collapsed shape, e.g. ``"T98.6" -> ("Xdd.d", "Xd.d")``."""
    full = "".join(
        "X" if c.isupper() else "x" if c.islower() else "d" if c.isdigit() else c
        for c in token_text
    )
    compressed = "".join(c for i, c in enumerate(full) if i == 0 or full[i - 1] != c)
    return full, compressed


def unit_regex_features(token_text: str) -> FrozenSet[str]:
    return frozenset(name for name, pat in UNIT_PATTERNS.items() if pat.fullmatch(token_text))


def length_bucket(token_text: str) -> str:
    n = len(token_text)
    return str(n) if n < 6 else "6+"


@dataclass(frozen=True)
class Lexicon:
    """Phrase dictionary standing in for a terminology server.

    Keys are lowercased, single-spaced phrases; each maps to a dict of the six
    attribute lists (``cui``, ``lui``, ``rel``, ``sty``, ``tty``, ``abr``).
    """

    entries: Mapping[str, Mapping[str, Tuple[str, ...]]] = field(default_factory=dict)

    @property
    def max_phrase_len(self) -> int:
        return max((len(p.split(" ")) for p in self.entries), default=0)

    @classmethod
    def from_lines(cls, lines) -> "Lexicon":
        entries: Dict[str, Dict[str, Tuple[str, ...]]] = {}
        for lineno, line in enumerate(lines, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            phrase, sep, attrs = line.partition("\t")
            phrase = normalize_phrase(phrase)
            if not sep or not phrase:
                raise FormatError("expected 'phrase<TAB>attributes'", lineno)
            record = {a: () for a in LEXICON_ATTRIBUTES}
            for part in attrs.split(";"):
                key, eq, values = part.partition("=")
                key = key.strip()
                if not eq or key not in record:
                    raise FormatError(f"bad lexicon attribute {part!r}", lineno)
                record[key] = tuple(v for v in (x.strip() for x in values.split(",")) if v)
            entries[phrase] = record
        return cls(entries)

    @classmethod
    def load(cls, path) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    @classmethod
    def sample(cls) -> "Lexicon":
        text = resources.files("clinex").joinpath("data/sample_lexicon.tsv").read_text("utf-8")
        return cls.from_lines(text.splitlines())

    def dumps(self) -> str:
        return "".join(
            f"{phrase}\t"
            + ";".join(f"{a}={','.join(rec[a])}" for a in LEXICON_ATTRIBUTES)
            + "\n"
            for phrase, rec in sorted(self.entries.items())
        )


def normalize_phrase(text: str) -> str:
    return " ".join(text.lower().split())


def lexicon_lookup(tokens: Sequence[str], lexicon: Lexicon) -> List[FrozenSet[Feature]]:
    """Greedy longest match, left to right, over lowercased token n-grams."""
    out: List[FrozenSet[Feature]] = [frozenset()] * len(tokens)
    lowered = [t.lower() for t in tokens]
    max_len = lexicon.max_phrase_len
    i = 0
    while i < len(tokens):
        for n in range(min(max_len, len(tokens) - i), 0, -1):
            record = lexicon.entries.get(" ".join(lowered[i : i + n]))
            if record is not None:
                feats = frozenset(
                    (f"umls-{a}", v) for a in LEXICON_ATTRIBUTES for v in record[a]
                )
                out[i : i + n] = [feats] * n
                i += n
                break
        else:
            i += 1
    return out


class PosTagger(Protocol):
    def tag(self, tokens: Sequence[str]) -> List[str]: ...


_PUNCT = set(string.punctuation)


def fallback_pos_tag(tokens: Sequence[str]) -> List[str]:
    tags = []
    for tok in tokens:
        low = tok.lower()
        if any(c.isdigit() for c in tok):
            tags.append("NUM")
        elif all(c in _PUNCT for c in tok):
            tags.append("PUNCT")
        elif not any(c.isalpha() for c in tok):
            tags.append("OTHER")
        elif low.endswith("ly"):
            tags.append("ADV")
        elif low.endswith(("ing", "ed")):
            tags.append("VERB")
        elif low.endswith(("ous", "al", "ive")):
            tags.append("ADJ")
        else:
            tags.append("NOUN")
    return tags


class FallbackPosTagger:
    tagset = POS_TAGSET

    def tag(self, tokens: Sequence[str]) -> List[str]:
        return fallback_pos_tag(tokens)


def read_pos_sidecar(path) -> List[List[str]]:
    """One line of whitespace-separated tags per sentence (blank note lines skipped)."""
    text = Path(path).read_text(encoding="utf-8")
    return [line.split() for line in text.splitlines() if line.strip()]


def word_features(token: str, pos: str, lexicon_feats: FrozenSet[Feature]) -> FrozenSet[Feature]:
    full, compressed = word_shape(token)
    feats = {
        ("unigram", token.lower()),
        ("last2", token[-2:].lower()),
        ("shape-full", full),
        ("shape-compressed", compressed),
        ("pos", pos),
        ("len", length_bucket(token)),
    }
    feats.update(("unit", u) for u in unit_regex_features(token))
    feats.update(lexicon_feats)
    return frozenset(feats)


def extract_features(
    sentence: Sentence,
    lexicon: Optional[Lexicon] = None,
    pos_tagger: Optional[PosTagger] = None,
    pos_tags: Optional[Sequence[str]] = None,
) -> List[FeatureVector]:
    words = sentence.words if isinstance(sentence, Sentence) else list(sentence)
    if not words:
        raise ValueError("cannot extract features from an empty sentence")
    if pos_tags is None:
        pos_tags = (pos_tagger or FallbackPosTagger()).tag(words)
    if len(pos_tags) != len(words):
        raise ValueError(f"{len(pos_tags)} POS tags for {len(words)} tokens")
    lex = lexicon_lookup(words, lexicon) if lexicon is not None else [frozenset()] * len(words)
    local = [word_features(w, p, lx) for w, p, lx in zip(words, pos_tags, lex)]
    lowered = [w.lower() for w in words]
    n = len(words)
    out = []
    for i in range(n):
        feats = set(local[i])
        for d in (1, 2, 3):
            feats.add((f"prev3-{d}", lowered[i - d] if i - d >= 0 else BOS))
            feats.add((f"next3-{d}", lowered[i + d] if i + d < n else EOS))
        if i > 0:
            feats.update((f"prev1:{ns}", v) for ns, v in local[i - 1])
        else:
            feats.add(("prev1:boundary", BOS))
        if i + 1 < n:
            feats.update((f"next1:{ns}", v) for ns, v in local[i + 1])
        else:
            feats.add(("next1:boundary", EOS))
        out.append(frozenset(feats))
    return out
