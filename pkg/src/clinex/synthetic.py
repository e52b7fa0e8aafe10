"""Seeded synthetic discharge-note generator used as a self-contained corpus.

Concept phrases are drawn from labeled pools and dropped into carrier
templates, so gold spans are known by construction.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from clinex.corpus import CONCEPT_TYPES, ConceptSpan, Document, load_document, tokenize, write_concept_file

PROBLEMS = [
    "chest pain", "shortness of breath", "hypertension", "diabetes mellitus",
    "atrial fibrillation", "pneumonia", "acute renal failure", "anemia",
    "congestive heart failure", "nausea", "vomiting", "fever", "cough",
    "abdominal pain", "headache", "hyperlipidemia", "sepsis", "urinary tract infection",
    "deep vein thrombosis", "pulmonary embolism", "hypotension", "dizziness",
    "lower extremity edema", "gastrointestinal bleed", "hypokalemia", "syncope",
    "myocardial infarction", "coronary artery disease", "cellulitis", "confusion",
    "back pain", "diarrhea", "elevated creatinine", "a rash", "his symptoms",
    "respiratory distress", "chronic obstructive pulmonary disease", "weakness",
]
TESTS = [
    "ekg", "chest x-ray", "ct scan", "echocardiogram", "blood cultures",
    "urinalysis", "cbc", "hemoglobin", "white blood cell count", "creatinine",
    "potassium", "troponin", "blood pressure", "heart rate", "mri of the brain",
    "abdominal ultrasound", "cardiac catheterization", "stress test", "inr",
    "arterial blood gas", "lipid panel", "hba1c", "sodium", "liver function tests",
    "urine culture", "temperature", "oxygen saturation", "bun", "lactate",
    "physical exam", "a ct of the abdomen", "repeat labs", "platelet count",
]
TREATMENTS = [
    "aspirin", "lisinopril", "metoprolol", "insulin", "heparin", "coumadin",
    "lasix", "vancomycin", "levofloxacin", "ceftriaxone", "morphine", "tylenol",
    "nitroglycerin", "oxygen", "iv fluids", "blood transfusion", "atorvastatin",
    "prednisone", "albuterol nebulizers", "potassium chloride", "a pacemaker",
    "cardiac catheterization with stent placement", "physical therapy", "zofran",
    "protonix", "colace", "plavix", "digoxin", "amiodarone", "antibiotics",
    "surgery", "dialysis", "hydralazine",
]

TEMPLATES = [
    "The patient presented with {problem} .",
    "He was started on {treatment} for {problem} .",
    "She has a history of {problem} and {problem} .",
    "{test} showed {problem} .",
    "{test} was unremarkable .",
    "Patient was given {treatment} {dose} and {treatment} .",
    "{test} on admission was {value} .",
    "Denies {problem} or {problem} .",
    "A {test} was obtained which revealed {problem} .",
    "Continue {treatment} {dose} daily .",
    "Her {problem} improved after {treatment} .",
    "Discharged home on {treatment} .",
    "{test} {value} , {test} {value} .",
    "Follow up {test} in two weeks .",
    "No evidence of {problem} on {test} .",
    "Complained of {problem} overnight , treated with {treatment} .",
]
FILLERS = [
    "HISTORY OF PRESENT ILLNESS :",
    "HOSPITAL COURSE :",
    "DISCHARGE INSTRUCTIONS :",
    "Patient is a 67 year old male .",
    "Seen and examined at bedside .",
    "Family was updated on the plan .",
    "Will follow up with primary care .",
]
DOSES = ["10mg", "25mg", "81mg", "40mg", "100mcg", "2g", "500ml", "5mg"]
VALUES = ["120/80", "98.6F", "94%", "7.2", "1.4", "135", "3.2", "12:30", "38.5C", "110/70"]

_SLOT = re.compile(r"\{(\w+)\}")


@dataclass
class SyntheticGrammar:
    """Phrase pools per concept type plus carrier templates.

    Templates mark concept slots as ``{problem}``, ``{test}`` or
    ``{treatment}``; ``{dose}`` and ``{value}`` slots draw unlabeled filler.
    """

    phrases: Dict[str, Sequence[str]] = field(
        default_factory=lambda: {"problem": PROBLEMS, "test": TESTS, "treatment": TREATMENTS}
    )
    templates: Sequence[str] = field(default_factory=lambda: list(TEMPLATES))
    fillers: Sequence[str] = field(default_factory=lambda: list(FILLERS))
    doses: Sequence[str] = field(default_factory=lambda: list(DOSES))
    values: Sequence[str] = field(default_factory=lambda: list(VALUES))
    lines_per_doc: Tuple[int, int] = (6, 12)

    def validate(self):
        for kind in CONCEPT_TYPES:
            if not self.phrases.get(kind):
                raise ValueError(f"empty phrase pool for {kind!r}")
        if not self.templates:
            raise ValueError("no carrier templates")


def _render(template: str, grammar: SyntheticGrammar, rng: random.Random, line_index: int):
    words: List[str] = []
    spans = []
    for piece in re.split(r"(\{\w+\})", template):
        m = _SLOT.fullmatch(piece)
        if m is None:
            words.extend(piece.split())
            continue
        slot = m.group(1)
        if slot in CONCEPT_TYPES:
            phrase = rng.choice(list(grammar.phrases[slot])).split()
            spans.append((slot, len(words), len(words) + len(phrase) - 1))
            words.extend(phrase)
        elif slot == "dose":
            words.append(rng.choice(list(grammar.doses)))
        elif slot == "value":
            words.append(rng.choice(list(grammar.values)))
        else:
            raise ValueError(f"unknown template slot {slot!r}")
    if words:
        words[0] = words[0][:1].upper() + words[0][1:]
    return " ".join(words), spans


def generate_synthetic_corpus(
    seed: int, n_documents: int, grammar: SyntheticGrammar = None
) -> Tuple[List[Document], List[List[ConceptSpan]]]:
    if n_documents <= 0:
        raise ValueError("n_documents must be positive")
    grammar = grammar or SyntheticGrammar()
    grammar.validate()
    rng = random.Random(seed)
    documents, gold = [], []
    width = max(4, len(str(n_documents)))
    for d in range(n_documents):
        doc_id = f"synth{d:0{width}d}"
        lines: List[str] = []
        doc_spans: List[ConceptSpan] = []
        n_lines = rng.randint(*grammar.lines_per_doc)
        for _ in range(n_lines):
            if rng.random() < 0.1:
                lines.append("")
            lineno = len(lines) + 1
            if rng.random() < 0.15 and grammar.fillers:
                lines.append(rng.choice(list(grammar.fillers)))
                continue
            text, slots = _render(rng.choice(list(grammar.templates)), grammar, rng, lineno)
            tokens = [t.text for t in tokenize(text)]
            for kind, start, end in slots:
                doc_spans.append(
                    ConceptSpan(doc_id, lineno, start, end, kind, " ".join(tokens[start : end + 1]))
                )
            lines.append(text)
        documents.append(load_document("\n".join(lines) + "\n", doc_id))
        gold.append(doc_spans)
    return documents, gold


def train_test_split(n_documents: int, train_fraction: float = 0.8) -> Tuple[List[int], List[int]]:
    """Leading documents train, trailing documents test."""
    cut = int(round(n_documents * train_fraction))
    return list(range(cut)), list(range(cut, n_documents))


def write_corpus(out_dir, documents, gold, train_fraction: float = 0.8) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for doc, spans in zip(documents, gold):
        (out / f"{doc.doc_id}.txt").write_text(
            "".join(line + "\n" for line in doc.raw_lines), encoding="utf-8"
        )
        (out / f"{doc.doc_id}.con").write_text(write_concept_file(spans), encoding="utf-8")
    train, test = train_test_split(len(documents), train_fraction)
    manifest = out / "manifest.tsv"
    rows = [f"{documents[i].doc_id}\ttrain\n" for i in train]
    rows += [f"{documents[i].doc_id}\ttest\n" for i in test]
    manifest.write_text("".join(rows), encoding="utf-8")
    return manifest
