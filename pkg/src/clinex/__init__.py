"""Clinical concept extraction with a feature CRF or a word+char BiLSTM-CRF."""

from clinex.corpus import (
    LABELS,
    ConceptSpan,
    Document,
    Sentence,
    Token,
    iob_to_spans,
    load_document,
    parse_concept_file,
    spans_to_iob,
    tokenize,
    write_concept_file,
)
from clinex.evaluate import EvalReport, evaluate, format_report

__version__ = "0.1.0"

__all__ = [
    "LABELS",
    "ConceptSpan",
    "Document",
    "EvalReport",
    "Sentence",
    "Token",
    "evaluate",
    "format_report",
    "iob_to_spans",
    "load_document",
    "parse_concept_file",
    "spans_to_iob",
    "tokenize",
    "write_concept_file",
]
