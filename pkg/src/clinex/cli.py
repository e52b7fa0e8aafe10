"""Command line entry point: ``clinex {synth,train,predict,evaluate}``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from clinex.corpus import TOKENIZERS, ConceptSpan, Document, document_spans, document_tags, parse_concept_file, read_document, write_concept_file
from clinex.crf import CRF_FORMAT, CrfModel, CrfTrainConfig, train_crf
from clinex.errors import DataError, NumericalError
from clinex.evaluate import evaluate, format_key_values, format_report
from clinex.features import Lexicon, read_pos_sidecar
from clinex.neural import NEURAL_FORMAT, NeuralModel, TrainConfig, predict_tags, train_neural
from clinex.synthetic import generate_synthetic_corpus, write_corpus

log = logging.getLogger("clinex")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
MANIFEST = "manifest.tsv"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model_type: Optional[str] = None
    txt: Optional[str] = None
    con: Optional[str] = None
    pred: Optional[str] = None
    model: Optional[str] = None
    out: Optional[str] = None
    lexicon: Optional[str] = None
    embeddings: Optional[str] = None
    pos: Optional[str] = None
    split: Optional[str] = None
    seed: int = 0
    n_documents: int = 200
    tokenizer: str = "default"
    crf: CrfTrainConfig = field(default_factory=CrfTrainConfig)
    lstm: TrainConfig = field(default_factory=TrainConfig)


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def parse_config_text(text: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise UsageError(f"config line {lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def apply_config(cfg: RunConfig, items: Dict[str, str]) -> RunConfig:
    top = {f.name for f in fields(RunConfig)} - {"crf", "lstm"}
    for key, value in items.items():
        norm = key.replace("-", "_")
        section, _, name = norm.partition(".")
        if name and section in ("crf", "lstm"):
            target = getattr(cfg, section)
            if name not in {f.name for f in fields(target)}:
                raise UsageError(f"unknown config key {key!r}")
            current = getattr(target, name)
            if current is None:
                setattr(target, name, value or None)
            else:
                setattr(target, name, _coerce(value, current))
        elif norm in top:
            current = getattr(cfg, norm)
            setattr(cfg, norm, _coerce(value, current) if current is not None else value)
        else:
            raise UsageError(f"unknown config key {key!r}")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clinex", description="Clinical concept extraction (CRF or BiLSTM-CRF).")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--split", choices=["train", "test"], help="restrict to documents of one manifest split")

    p = sub.add_parser("train", help="train a model on .txt/.con pairs")
    common(p)
    p.add_argument("--model-type", choices=["crf", "lstm"])
    p.add_argument("--txt")
    p.add_argument("--con")
    p.add_argument("--model", help="output model path")
    p.add_argument("--lexicon")
    p.add_argument("--embeddings")
    p.add_argument("--pos", help="directory of <doc>.pos tag sidecars")

    p = sub.add_parser("predict", help="write one .con per input .txt")
    common(p)
    p.add_argument("--model-type", choices=["crf", "lstm"])
    p.add_argument("--model")
    p.add_argument("--txt")
    p.add_argument("--out")
    p.add_argument("--pos")

    p = sub.add_parser("evaluate", help="exact class-match P/R/F1")
    common(p)
    p.add_argument("--txt")
    p.add_argument("--con", help="gold .con directory")
    p.add_argument("--pred", help="predicted .con directory")
    p.add_argument("--out", help="directory for a key=value report.txt")

    p = sub.add_parser("synth", help="write a seeded synthetic corpus")
    common(p)
    p.add_argument("--out")
    p.add_argument("--n-documents", type=int)
    return parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        apply_config(cfg, parse_config_text(path.read_text(encoding="utf-8")))
    for name in ("model_type", "txt", "con", "pred", "model", "out", "lexicon", "embeddings", "pos", "split", "n_documents"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if cfg.tokenizer not in TOKENIZERS:
        raise UsageError(f"tokenizer must be one of {sorted(TOKENIZERS)}, got {cfg.tokenizer!r}")
    seed = args.seed if args.seed is not None else cfg.seed
    cfg.seed = seed
    cfg.crf.seed = seed
    cfg.lstm.seed = seed
    return cfg


def _need(cfg: RunConfig, *names):
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _existing_dir(path, what) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} directory not found: {p}")
    return p


def _basenames(directory: Path, suffix: str) -> List[str]:
    return sorted(p.stem for p in directory.glob(f"*{suffix}") if p.is_file())


def _split_filter(names: List[str], txt_dir: Path, split: Optional[str]) -> List[str]:
    if split is None:
        return names
    manifest = txt_dir / MANIFEST
    if not manifest.is_file():
        raise DataError(f"--split given but {manifest} does not exist")
    keep = set()
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.strip():
            doc, _, part = line.partition("\t")
            if part.strip() == split:
                keep.add(doc.strip())
    return [n for n in names if n in keep]


def _paired(txt_dir: Path, con_dir: Path, split) -> List[str]:
    txt = set(_basenames(txt_dir, ".txt"))
    con = set(_basenames(con_dir, ".con"))
    if txt != con:
        offenders = sorted(txt ^ con)
        raise DataError("unmatched .txt/.con basenames: " + ", ".join(offenders))
    return _split_filter(sorted(txt), txt_dir, split)


def _read_pos(pos_dir, doc: Document):
    if pos_dir is None:
        return [None] * len(doc.sentences)
    path = Path(pos_dir) / f"{doc.doc_id}.pos"
    if not path.is_file():
        raise DataError(f"missing POS sidecar {path}")
    tags = read_pos_sidecar(path)
    if len(tags) != len(doc.sentences):
        raise DataError(f"{path}: {len(tags)} tag lines for {len(doc.sentences)} sentences")
    for sent, row in zip(doc.sentences, tags):
        if len(row) != len(sent):
            raise DataError(f"{path}: line {sent.line_index} has {len(row)} tags for {len(sent)} tokens")
    return tags


def load_annotated(txt_dir: Path, con_dir: Path, names: Sequence[str], tokenizer="default"):
    docs, spans = [], []
    for name in names:
        doc = read_document(txt_dir / f"{name}.txt", name, TOKENIZERS[tokenizer])
        con = parse_concept_file((con_dir / f"{name}.con").read_bytes(), name)
        docs.append(doc)
        spans.append(con)
    return docs, spans


def cmd_train(cfg: RunConfig) -> int:
    _need(cfg, "model_type", "txt", "con", "model")
    txt_dir, con_dir = _existing_dir(cfg.txt, "--txt"), _existing_dir(cfg.con, "--con")
    names = _paired(txt_dir, con_dir, cfg.split)
    if not names:
        raise DataError("no training documents found")
    docs, spans = load_annotated(txt_dir, con_dir, names, cfg.tokenizer)
    corpus, pos = [], []
    for doc, doc_spans in zip(docs, spans):
        tags = document_tags(doc, doc_spans)
        corpus.extend(zip(doc.sentences, tags))
        pos.extend(_read_pos(cfg.pos, doc))
    if not corpus:
        raise DataError("training documents contain no sentences")
    log.info("training %s on %d documents, %d sentences", cfg.model_type, len(docs), len(corpus))
    if cfg.model_type == "crf":
        lexicon = Lexicon.load(cfg.lexicon) if cfg.lexicon else Lexicon.sample()
        model = train_crf(corpus, cfg.crf, lexicon=lexicon, pos_tags=pos)
        log_lines = [f"{epoch}\t{loss!r}\n" for epoch, loss in enumerate(model.training_log, start=1)]
    else:
        if cfg.embeddings:
            if not Path(cfg.embeddings).is_file():
                raise DataError(f"embedding file not found: {cfg.embeddings}")
            cfg.lstm.embedding_path = cfg.embeddings
        elif not cfg.lstm.embedding_path:
            log.warning("no --embeddings given; word vectors start from random initialization")
        model = train_neural(corpus, cfg.lstm)
        log_lines = [json.dumps(entry, sort_keys=True) + "\n" for entry in model.training_log]
    model_path = Path(cfg.model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(model_path)
    Path(str(model_path) + ".log").write_text("".join(log_lines), encoding="utf-8")
    log.info("wrote %s", model_path)
    return 0


def load_model(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not a model file: {exc}") from None
    kind = data.get("format") if isinstance(data, dict) else None
    if kind == CRF_FORMAT:
        return CrfModel.from_dict(data)
    if kind == NEURAL_FORMAT:
        return NeuralModel.from_dict(data)
    raise DataError(f"{path}: unrecognized model format {kind!r}")


def tag_document(model, doc: Document, pos_tags=None) -> List[ConceptSpan]:
    if not doc.sentences:
        return []
    if isinstance(model, CrfModel):
        pos_tags = pos_tags or [None] * len(doc.sentences)
        tags = [model.tag(s, p) for s, p in zip(doc.sentences, pos_tags)]
    else:
        tags = predict_tags(model, doc.sentences)
    return document_spans(doc, tags)


def cmd_predict(cfg: RunConfig) -> int:
    _need(cfg, "model", "txt", "out")
    model = load_model(cfg.model)
    expected = {"crf": CrfModel, "lstm": NeuralModel}.get(cfg.model_type)
    if expected is not None and not isinstance(model, expected):
        raise DataError(f"--model-type {cfg.model_type} does not match the model file")
    txt_dir = _existing_dir(cfg.txt, "--txt")
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = _split_filter(_basenames(txt_dir, ".txt"), txt_dir, cfg.split)
    for name in names:
        doc = read_document(txt_dir / f"{name}.txt", name, TOKENIZERS[cfg.tokenizer])
        pos = _read_pos(cfg.pos, doc) if cfg.pos else None
        spans = tag_document(model, doc, pos)
        (out_dir / f"{name}.con").write_text(write_concept_file(spans), encoding="utf-8")
    log.info("wrote %d prediction files to %s", len(names), out_dir)
    return 0


def cmd_evaluate(cfg: RunConfig, stdout=None) -> int:
    _need(cfg, "txt", "con", "pred")
    stdout = stdout or sys.stdout
    txt_dir = _existing_dir(cfg.txt, "--txt")
    gold_dir = _existing_dir(cfg.con, "--con")
    pred_dir = _existing_dir(cfg.pred, "--pred")
    names = _split_filter(_basenames(gold_dir, ".con"), txt_dir, cfg.split)
    missing = [
        str(d / f"{n}{ext}")
        for n in names
        for d, ext in ((txt_dir, ".txt"), (pred_dir, ".con"))
        if not (d / f"{n}{ext}").is_file()
    ]
    if missing:
        raise DataError("missing counterpart file(s): " + ", ".join(missing))
    gold, pred = [], []
    for name in names:
        doc = read_document(txt_dir / f"{name}.txt", name, TOKENIZERS[cfg.tokenizer])
        for directory, bucket in ((gold_dir, gold), (pred_dir, pred)):
            spans = parse_concept_file((directory / f"{name}.con").read_bytes(), name)
            document_tags(doc, spans)
            bucket.extend(spans)
    report = evaluate(gold, pred)
    stdout.write(format_report(report))
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(format_key_values(report), encoding="utf-8")
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    _need(cfg, "out")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        docs, gold = generate_synthetic_corpus(cfg.seed, cfg.n_documents)
        write_corpus(out, docs, gold)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from None
    log.info("wrote %d synthetic documents to %s", len(docs), out)
    return 0


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate, "synth": cmd_synth}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"clinex: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as exc:
        # DataError is a ValueError; config values that fail validation land here too
        print(f"clinex: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"clinex: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"clinex: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
