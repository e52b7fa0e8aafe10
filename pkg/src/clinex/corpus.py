"""Notes, concept annotations, tokenization and IOB conversion.

One physical line of a note is one sentence. Concept annotations use the
i2b2 ``.con`` line grammar::

    c="chest pain" 4:2 4:3||t="problem"

where line numbers are 1-based and token offsets are 0-based and inclusive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from clinex.errors import DataError, FormatError

CONCEPT_TYPES = ("problem", "test", "treatment")
LABELS = (
    "O",
    "B-problem",
    "I-problem",
    "B-test",
    "I-test",
    "B-treatment",
    "I-treatment",
)
LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}

# Split off token edges; "%", "/", "-", "+" etc. stay attached.
PERIPHERAL_PUNCT = frozenset(".,;:!?()[]{}\"'")


@dataclass(frozen=True)
class Token:
    text: str
    line_index: int
    token_index: int
    char_start: int
    char_end: int


@dataclass(frozen=True)
class Sentence:
    tokens: Tuple[Token, ...]
    line_index: int

    def __len__(self):
        return len(self.tokens)

    @property
    def words(self) -> List[str]:
        return [t.text for t in self.tokens]


@dataclass(frozen=True)
class Document:
    doc_id: str
    sentences: Tuple[Sentence, ...]
    raw_lines: Tuple[str, ...]

    def sentence_at(self, line_index: int) -> Optional[Sentence]:
        for sent in self.sentences:
            if sent.line_index == line_index:
                return sent
        return None


@dataclass(frozen=True, order=True)
class ConceptSpan:
    """A labeled run of contiguous tokens on one line.

    ``start_token`` and ``end_token`` are inclusive. Ordering sorts by
    document, line and start offset.
    """

    doc_id: str = field(default="", compare=True)
    line_index: int = 1
    start_token: int = 0
    end_token: int = 0
    label: str = "problem"
    text: str = ""

    def __post_init__(self):
        if self.label not in CONCEPT_TYPES:
            raise DataError(f"unknown concept type {self.label!r}")
        if self.line_index < 1:
            raise DataError(f"line index must be >= 1, got {self.line_index}")
        if self.start_token < 0 or self.start_token > self.end_token:
            raise DataError(
                f"bad token range {self.start_token}..{self.end_token} on line {self.line_index}"
            )

    @property
    def key(self) -> Tuple[str, int, int, int, str]:
        return (self.doc_id, self.line_index, self.start_token, self.end_token, self.label)


def tokenize(raw_line: str, line_index: int = 1) -> List[Token]:
    """Whitespace split, then peel punctuation characters off both ends.

    >>> [t.text for t in tokenize("BP 120/80.")]
    ['BP', '120/80', '.']
    """
    if "\n" in raw_line:
        raise ValueError("tokenize expects a single line")
    pieces: List[Tuple[int, int]] = []
    for m in re.finditer(r"\S+", raw_line):
        start, end = m.start(), m.end()
        lead = []
        while start < end and raw_line[start] in PERIPHERAL_PUNCT:
            lead.append((start, start + 1))
            start += 1
        trail = []
        while end > start and raw_line[end - 1] in PERIPHERAL_PUNCT:
            trail.append((end - 1, end))
            end -= 1
        pieces.extend(lead)
        if start < end:
            pieces.append((start, end))
        pieces.extend(reversed(trail))
    return [
        Token(raw_line[s:e], line_index, i, s, e) for i, (s, e) in enumerate(pieces)
    ]


def whitespace_tokenize(raw_line: str, line_index: int = 1) -> List[Token]:
    """Plain whitespace split, for text that is already tokenized (as in i2b2 releases)."""
    return [
        Token(m.group(), line_index, i, m.start(), m.end())
        for i, m in enumerate(re.finditer(r"\S+", raw_line))
    ]


TOKENIZERS = {"default": tokenize, "whitespace": whitespace_tokenize}


def _decode(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"invalid UTF-8 at byte offset {exc.start}") from exc


def load_document(note_text: Union[str, bytes], doc_id: str = "", tokenizer=tokenize) -> Document:
    if isinstance(note_text, bytes):
        note_text = _decode(note_text)
    raw_lines = note_text.split("\n") if note_text else []
    if raw_lines and raw_lines[-1] == "":
        raw_lines.pop()
    raw_lines = [line[:-1] if line.endswith("\r") else line for line in raw_lines]
    sentences = []
    for lineno, line in enumerate(raw_lines, start=1):
        tokens = tokenizer(line, lineno)
        if tokens:
            sentences.append(Sentence(tuple(tokens), lineno))
    return Document(doc_id, tuple(sentences), tuple(raw_lines))


def read_document(path, doc_id: Optional[str] = None, tokenizer=tokenize) -> Document:
    from pathlib import Path

    path = Path(path)
    return load_document(path.read_bytes(), path.stem if doc_id is None else doc_id, tokenizer)


_CON_LINE = re.compile(
    r'^c="(?P<text>.*)" (?P<l1>\d+):(?P<s>\d+) (?P<l2>\d+):(?P<e>\d+)\|\|t="(?P<type>[^"]*)"$'
)


def parse_concept_file(con_text: Union[str, bytes], doc_id: str = "") -> List[ConceptSpan]:
    if isinstance(con_text, bytes):
        con_text = _decode(con_text)
    spans = []
    for lineno, line in enumerate(con_text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        m = _CON_LINE.match(line)
        if m is None:
            raise FormatError(f"malformed concept record: {line!r}", lineno)
        l1, l2 = int(m["l1"]), int(m["l2"])
        if l1 != l2:
            raise FormatError(f"concept spans lines {l1} to {l2}", lineno)
        start, end = int(m["s"]), int(m["e"])
        if start > end:
            raise FormatError(f"start token {start} after end token {end}", lineno)
        if m["type"] not in CONCEPT_TYPES:
            raise FormatError(f"unknown concept type {m['type']!r}", lineno)
        if l1 < 1:
            raise FormatError("line numbers are 1-based", lineno)
        spans.append(ConceptSpan(doc_id, l1, start, end, m["type"], m["text"]))
    return spans


def write_concept_file(spans: Iterable[ConceptSpan]) -> str:
    ordered = sorted(spans, key=lambda s: (s.line_index, s.start_token, s.end_token, s.label))
    return "".join(
        f'c="{s.text.lower()}" {s.line_index}:{s.start_token} '
        f'{s.line_index}:{s.end_token}||t="{s.label}"\n'
        for s in ordered
    )


def spans_to_iob(sentence: Sentence, spans: Iterable[ConceptSpan]) -> List[str]:
    n = len(sentence.tokens)
    tags = ["O"] * n
    for span in spans:
        if span.line_index != sentence.line_index:
            raise DataError(
                f"span on line {span.line_index} given for sentence on line {sentence.line_index}"
            )
        if span.end_token >= n:
            raise DataError(
                f"{span.doc_id or 'document'} line {span.line_index}: span "
                f"{span.start_token}..{span.end_token} exceeds {n} tokens"
            )
        for i in range(span.start_token, span.end_token + 1):
            if tags[i] != "O":
                raise DataError(
                    f"{span.doc_id or 'document'} line {span.line_index}: overlapping spans at token {i}"
                )
            tags[i] = ("B-" if i == span.start_token else "I-") + span.label
    return tags


def iob_to_spans(
    tags: Sequence[str], sentence: Sentence, doc_id: str = ""
) -> List[ConceptSpan]:
    """Decode tags into spans. An ``I-X`` that cannot continue a span opens one."""
    if len(tags) != len(sentence.tokens):
        raise ValueError(f"{len(tags)} tags for {len(sentence.tokens)} tokens")
    spans = []
    start = None
    kind = None

    def close(end):
        words = [t.text for t in sentence.tokens[start : end + 1]]
        spans.append(
            ConceptSpan(doc_id, sentence.line_index, start, end, kind, " ".join(words))
        )

    for i, tag in enumerate(tags):
        if tag not in LABEL_INDEX:
            raise ValueError(f"unknown tag {tag!r}")
        prefix, _, label = tag.partition("-")
        if kind is not None and (prefix != "I" or label != kind):
            close(i - 1)
            kind = None
        if prefix == "B" or (prefix == "I" and kind is None):
            start, kind = i, label
    if kind is not None:
        close(len(tags) - 1)
    return spans


def document_tags(doc: Document, spans: Iterable[ConceptSpan]) -> List[List[str]]:
    """IOB tags for every sentence of ``doc``; spans on blank lines are an error."""
    by_line: dict = {}
    for span in spans:
        by_line.setdefault(span.line_index, []).append(span)
    lines = {s.line_index for s in doc.sentences}
    stray = sorted(set(by_line) - lines)
    if stray:
        raise DataError(f"{doc.doc_id}: annotation on line {stray[0]} which has no tokens")
    return [spans_to_iob(s, by_line.get(s.line_index, ())) for s in doc.sentences]


def document_spans(doc: Document, tag_seqs: Sequence[Sequence[str]]) -> List[ConceptSpan]:
    out: List[ConceptSpan] = []
    for sent, tags in zip(doc.sentences, tag_seqs):
        out.extend(iob_to_spans(tags, sent, doc.doc_id))
    return out
