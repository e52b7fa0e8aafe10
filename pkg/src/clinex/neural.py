"""Word + character BiLSTM-CRF tagger with hand-written backpropagation.

Every word is spelled out through one shared character BiLSTM; its final
forward and backward states are concatenated with the word's embedding and
the result runs through a word-level BiLSTM. A linear layer maps each
position to seven emission scores, which feed the chain CRF from
:mod:`clinex.crf`.

Sentences in a mini-batch are padded and processed together; padding is
handled by masking so that states simply carry over past a row's end.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from clinex.corpus import LABELS, Document, Sentence, document_spans, iob_to_spans
from clinex.crf import N_LABELS, N_STATES, _padded_terms, viterbi_decode
from clinex.errors import FormatError, ModelVersionError, NumericalError

log = logging.getLogger(__name__)

NEURAL_FORMAT = "clinex-lstm"
NEURAL_FORMAT_VERSION = 1

PAD_CHAR, UNK_CHAR = "<pad>", "<unk>"
UNK_WORD = "<unk>"

PARAM_NAMES = (
    "char_emb",
    "char_fw_W",
    "char_fw_b",
    "char_bw_W",
    "char_bw_b",
    "word_emb",
    "word_fw_W",
    "word_fw_b",
    "word_bw_W",
    "word_bw_b",
    "proj_W",
    "proj_b",
    "transitions",
)


@dataclass
class TrainConfig:
    d_c: int = 25
    h_c: int = 25
    d_w: int = 100
    h_w: int = 100
    learning_rate: float = 0.01
    dropout_rate: float = 0.5
    epochs: int = 20
    batch_size: int = 8
    clip_norm: float = 5.0
    seed: int = 0
    embedding_path: Optional[str] = None
    freeze_word_embeddings: bool = False

    def validate(self):
        for name in ("d_c", "h_c", "d_w", "h_w", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EmbeddingReport:
    vocab_size: int
    hits: int
    dim: int

    @property
    def hit_rate(self) -> float:
        return self.hits / self.vocab_size if self.vocab_size else 0.0


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def load_word_embeddings(
    path, vocab: Sequence[str], rng: Optional[np.random.Generator] = None, dim: Optional[int] = None
) -> Tuple[np.ndarray, EmbeddingReport]:
    """Rows for ``vocab`` from a whitespace-separated ``token v1 ... vd`` file.

    Lookup is on lowercased tokens; rows missing from the file are drawn
    uniformly from [-0.25, 0.25].
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    wanted = {w.lower(): i for i, w in enumerate(vocab)}
    found: Dict[int, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            if len(parts) < 2:
                raise FormatError("embedding line has no vector", lineno)
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise FormatError(f"expected {dim} values, found {len(parts) - 1}", lineno)
            row = wanted.get(parts[0].lower())
            if row is not None and row not in found:
                try:
                    found[row] = np.array([float(v) for v in parts[1:]])
                except ValueError as exc:
                    raise FormatError(f"non-numeric embedding value ({exc})", lineno) from None
    if dim is None:
        raise FormatError("embedding file is empty")
    table = _uniform(rng, (len(vocab), dim), 0.25)
    for row, vec in found.items():
        table[row] = vec
    return table, EmbeddingReport(len(vocab), len(found), dim)


# -- LSTM primitives -----------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(x, mask, W, b):
    """Run an LSTM over ``x`` (B x L x d) with per-step ``mask`` (B x L).

    Gate layout in ``W``/``b`` is input, forget, output, candidate. Masked
    steps leave the state unchanged. Returns the per-step hidden states
    (B x L x h) and a cache for :func:`lstm_backward`.
    """
    B, L, _ = x.shape
    h_size = b.shape[0] // 4
    h = np.zeros((B, h_size))
    c = np.zeros((B, h_size))
    H = np.empty((B, L, h_size))
    steps = []
    for t in range(L):
        m = mask[:, t, None]
        xh = np.concatenate([x[:, t], h], axis=1)
        z = xh @ W + b
        i = _sigmoid(z[:, :h_size])
        f = _sigmoid(z[:, h_size : 2 * h_size])
        o = _sigmoid(z[:, 2 * h_size : 3 * h_size])
        g = np.tanh(z[:, 3 * h_size :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        steps.append((xh, c, i, f, o, g, tc, m))
        c = np.where(m, c_new, c)
        h = np.where(m, h_new, h)
        H[:, t] = h
    return H, steps


def lstm_backward(dH, steps, W):
    """Gradients for :func:`lstm_forward` given d(loss)/d(H)."""
    B, L, h_size = dH.shape
    d_in = W.shape[0] - h_size
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[1])
    dx = np.zeros((B, L, d_in))
    dh = np.zeros((B, h_size))
    dc = np.zeros((B, h_size))
    for t in range(L - 1, -1, -1):
        xh, c_prev, i, f, o, g, tc, m = steps[t]
        dh = dh + dH[:, t]
        dh_new = dh * m
        dc_new = dc * m + dh_new * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc_new * g * i * (1.0 - i),
                dc_new * c_prev * f * (1.0 - f),
                dh_new * tc * o * (1.0 - o),
                dc_new * i * (1.0 - g * g),
            ],
            axis=1,
        )
        dW += xh.T @ dz
        db += dz.sum(axis=0)
        dxh = dz @ W.T
        dx[:, t] = dxh[:, :d_in]
        keep = 1.0 - m
        dh = dxh[:, d_in:] + dh * keep
        dc = dc_new * f + dc * keep
    return dx, dW, db


def _reverse_index(lengths, L):
    """Per-row index that reverses the valid prefix of each row."""
    t = np.arange(L)[None, :]
    rev = lengths[:, None] - 1 - t
    return np.where(rev >= 0, rev, t)


def _gather_rows(a, idx):
    return np.take_along_axis(a, idx[:, :, None], axis=1)


def _scatter_rows(a, idx):
    out = np.empty_like(a)
    np.put_along_axis(out, idx[:, :, None], a, axis=1)
    return out


def bilstm_forward(x, lengths, fw, bw):
    """Forward and backward LSTM outputs, both aligned to the original order."""
    L = x.shape[1]
    mask = np.arange(L)[None, :] < lengths[:, None]
    rev = _reverse_index(lengths, L)
    H_f, cache_f = lstm_forward(x, mask, *fw)
    H_b_rev, cache_b = lstm_forward(_gather_rows(x, rev), mask, *bw)
    return H_f, H_b_rev, (mask, rev, cache_f, cache_b)


# -- model ---------------------------------------------------------------------


@dataclass
class NeuralModel:
    config: TrainConfig
    char_vocab: List[str]
    word_vocab: List[str]
    params: Dict[str, np.ndarray]
    training_log: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        self.char_index = {c: i for i, c in enumerate(self.char_vocab)}
        self.word_index = {w: i for i, w in enumerate(self.word_vocab)}

    @classmethod
    def initialize(
        cls,
        config: TrainConfig,
        char_vocab: Sequence[str],
        word_vocab: Sequence[str],
        word_table: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> "NeuralModel":
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        d_word_in = c.d_w + 2 * c.h_c
        p: Dict[str, np.ndarray] = {}
        p["char_emb"] = _uniform(rng, (len(char_vocab), c.d_c), 0.1)
        for d in ("fw", "bw"):
            p[f"char_{d}_W"] = _uniform(rng, (c.d_c + c.h_c, 4 * c.h_c), 0.1)
            p[f"char_{d}_b"] = _lstm_bias(rng, c.h_c)
        p["word_emb"] = (
            np.array(word_table, dtype=np.float64)
            if word_table is not None
            else _uniform(rng, (len(word_vocab), c.d_w), 0.25)
        )
        if p["word_emb"].shape != (len(word_vocab), c.d_w):
            raise ValueError(
                f"word table shape {p['word_emb'].shape} does not match ({len(word_vocab)}, {c.d_w})"
            )
        for d in ("fw", "bw"):
            p[f"word_{d}_W"] = _uniform(rng, (d_word_in + c.h_w, 4 * c.h_w), 0.1)
            p[f"word_{d}_b"] = _lstm_bias(rng, c.h_w)
        p["proj_W"] = _uniform(rng, (2 * c.h_w, N_LABELS), 0.1)
        p["proj_b"] = _uniform(rng, (N_LABELS,), 0.1)
        p["transitions"] = _uniform(rng, (N_STATES, N_STATES), 0.1)
        return cls(config, list(char_vocab), list(word_vocab), p)

    def char_ids(self, word: str) -> List[int]:
        unk = self.char_index[UNK_CHAR]
        return [self.char_index.get(ch, unk) for ch in word]

    def word_id(self, word: str) -> int:
        return self.word_index.get(word.lower(), self.word_index[UNK_WORD])

    # -- persistence -----------------------------------------------------------

    def to_dict(self) -> Dict:
        return {
            "format": NEURAL_FORMAT,
            "version": NEURAL_FORMAT_VERSION,
            "labels": list(LABELS),
            "config": asdict(self.config),
            "training_log": self.training_log,
            "char_vocab": self.char_vocab,
            "word_vocab": self.word_vocab,
            "params": {
                name: {"shape": list(self.params[name].shape), "data": self.params[name].ravel().tolist()}
                for name in PARAM_NAMES
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, data: Dict) -> "NeuralModel":
        if data.get("format") != NEURAL_FORMAT:
            raise FormatError(f"not a neural model file (format={data.get('format')!r})")
        if data.get("version") != NEURAL_FORMAT_VERSION:
            raise ModelVersionError(NEURAL_FORMAT_VERSION, data.get("version"))
        params = {}
        for name in PARAM_NAMES:
            entry = data["params"][name]
            params[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        return cls(
            TrainConfig(**data["config"]),
            list(data["char_vocab"]),
            list(data["word_vocab"]),
            params,
            list(data.get("training_log", [])),
        )

    @classmethod
    def loads(cls, text: str) -> "NeuralModel":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "NeuralModel":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _lstm_bias(rng, h):
    b = _uniform(rng, (4 * h,), 0.1)
    b[h : 2 * h] = 1.0
    return b


def build_vocabularies(sentences: Sequence[Sequence[str]]) -> Tuple[List[str], List[str]]:
    chars = sorted({ch for words in sentences for w in words for ch in w})
    words = sorted({w.lower() for ws in sentences for w in ws})
    return [PAD_CHAR, UNK_CHAR] + chars, [UNK_WORD] + words


# -- forward / backward over a batch -----------------------------------------


def _words(sentence) -> List[str]:
    return sentence.words if isinstance(sentence, Sentence) else list(sentence)


def _forward(model: NeuralModel, batch_words: Sequence[Sequence[str]], train: bool, rng=None):
    """Emission scores (B x T x 7) for a padded batch, plus the backprop cache."""
    p = model.params
    c = model.config
    lengths = np.array([len(ws) for ws in batch_words], dtype=np.intp)
    if lengths.min() < 1:
        raise ValueError("cannot encode an empty sentence")
    B, T = len(batch_words), int(lengths.max())
    flat_words = [w for ws in batch_words for w in ws]

    # characters: one row per word across the whole batch
    char_lengths = np.array([len(w) for w in flat_words], dtype=np.intp)
    Lc = int(char_lengths.max())
    char_ids = np.zeros((len(flat_words), Lc), dtype=np.intp)
    for r, w in enumerate(flat_words):
        char_ids[r, : len(w)] = model.char_ids(w)
    char_x = p["char_emb"][char_ids]
    Hc_f, Hc_b, char_cache = bilstm_forward(
        char_x, char_lengths, (p["char_fw_W"], p["char_fw_b"]), (p["char_bw_W"], p["char_bw_b"])
    )
    char_repr = np.concatenate([Hc_f[:, -1], Hc_b[:, -1]], axis=1)

    word_ids = np.array([model.word_id(w) for w in flat_words], dtype=np.intp)
    rep_flat = np.concatenate([p["word_emb"][word_ids], char_repr], axis=1)
    drop = None
    if train and c.dropout_rate > 0:
        keep = 1.0 - c.dropout_rate
        drop = (rng.random(rep_flat.shape) < keep) / keep
        rep_flat = rep_flat * drop

    mask = np.arange(T)[None, :] < lengths[:, None]
    x = np.zeros((B, T, rep_flat.shape[1]))
    x[mask] = rep_flat
    H_f, H_b_rev, word_cache = bilstm_forward(
        x, lengths, (p["word_fw_W"], p["word_fw_b"]), (p["word_bw_W"], p["word_bw_b"])
    )
    rev = word_cache[1]
    H = np.concatenate([H_f, _gather_rows(H_b_rev, rev)], axis=2)
    E = H @ p["proj_W"] + p["proj_b"]
    cache = dict(
        lengths=lengths,
        mask=mask,
        char_ids=char_ids,
        char_lengths=char_lengths,
        char_cache=char_cache,
        word_ids=word_ids,
        drop=drop,
        word_cache=word_cache,
        H=H,
    )
    return E, cache


def _backward(model: NeuralModel, dE, cache) -> Dict[str, np.ndarray]:
    p = model.params
    c = model.config
    mask = cache["mask"]
    dE = dE * mask[:, :, None]
    grads: Dict[str, np.ndarray] = {}
    H = cache["H"]
    grads["proj_W"] = H.reshape(-1, H.shape[2]).T @ dE.reshape(-1, N_LABELS)
    grads["proj_b"] = dE.sum(axis=(0, 1))
    dH = dE @ p["proj_W"].T
    word_mask, rev, cache_f, cache_b = cache["word_cache"]
    dH_f = dH[:, :, : c.h_w]
    dH_b_rev = _scatter_rows(np.ascontiguousarray(dH[:, :, c.h_w :]), rev)
    dx_f, grads["word_fw_W"], grads["word_fw_b"] = lstm_backward(dH_f, cache_f, p["word_fw_W"])
    dx_b_rev, grads["word_bw_W"], grads["word_bw_b"] = lstm_backward(dH_b_rev, cache_b, p["word_bw_W"])
    dx = dx_f + _scatter_rows(dx_b_rev, rev)
    d_rep = dx[mask]
    if cache["drop"] is not None:
        d_rep = d_rep * cache["drop"]

    d_word = d_rep[:, : c.d_w]
    d_char_repr = d_rep[:, c.d_w :]
    grads["word_emb"] = np.zeros_like(p["word_emb"])
    np.add.at(grads["word_emb"], cache["word_ids"], d_word)

    char_mask, crev, ccache_f, ccache_b = cache["char_cache"]
    n_words, Lc = char_mask.shape
    dHc_f = np.zeros((n_words, Lc, c.h_c))
    dHc_b = np.zeros((n_words, Lc, c.h_c))
    dHc_f[:, -1] = d_char_repr[:, : c.h_c]
    dHc_b[:, -1] = d_char_repr[:, c.h_c :]
    dcx_f, grads["char_fw_W"], grads["char_fw_b"] = lstm_backward(dHc_f, ccache_f, p["char_fw_W"])
    dcx_b_rev, grads["char_bw_W"], grads["char_bw_b"] = lstm_backward(dHc_b, ccache_b, p["char_bw_W"])
    dcx = dcx_f + _scatter_rows(dcx_b_rev, crev)
    grads["char_emb"] = np.zeros_like(p["char_emb"])
    np.add.at(grads["char_emb"], cache["char_ids"][char_mask], dcx[char_mask])
    return grads


def _pad_tags(tag_seqs, T):
    from clinex.corpus import LABEL_INDEX

    gold = np.zeros((len(tag_seqs), T), dtype=np.intp)
    for b, tags in enumerate(tag_seqs):
        gold[b, : len(tags)] = [LABEL_INDEX[t] if isinstance(t, str) else int(t) for t in tags]
    return gold


def _loss_and_grads(model, batch, train=False, rng=None):
    words = [_words(s) for s, _ in batch]
    tags = [t for _, t in batch]
    for w, t in zip(words, tags):
        if len(w) != len(t):
            raise ValueError(f"{len(t)} tags for {len(w)} tokens")
    E, cache = _forward(model, words, train, rng)
    gold = _pad_tags(tags, E.shape[1])
    loss, dE, d_trans = _padded_terms(E, cache["lengths"], gold, model.params["transitions"])
    grads = _backward(model, dE, cache)
    grads["transitions"] = d_trans
    return loss, grads


# -- public operations ---------------------------------------------------------


def char_encode(word: str, model: NeuralModel) -> np.ndarray:
    """Final forward state ⊕ final backward state of the character BiLSTM."""
    if not word:
        raise ValueError("empty word")
    p = model.params
    ids = np.array([model.char_ids(word)], dtype=np.intp)
    H_f, H_b, _ = bilstm_forward(
        p["char_emb"][ids],
        np.array([len(word)]),
        (p["char_fw_W"], p["char_fw_b"]),
        (p["char_bw_W"], p["char_bw_b"]),
    )
    return np.concatenate([H_f[0, -1], H_b[0, -1]])


def encode_sentence(words, model: NeuralModel, train_mode: bool = False, rng=None) -> np.ndarray:
    """T x 7 emission scores; ``train_mode`` turns on dropout (needs ``rng``)."""
    words = _words(words)
    if train_mode and rng is None:
        rng = np.random.default_rng(model.config.seed)
    E, _ = _forward(model, [words], train_mode, rng)
    return E[0]


def neural_nll_and_gradient(model: NeuralModel, batch) -> Tuple[float, Dict[str, np.ndarray]]:
    """Summed CRF negative log-likelihood of ``batch`` and exact gradients.

    ``batch`` holds ``(words, tags)`` pairs; dropout is not applied.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    loss, grads = _loss_and_grads(model, batch)
    _check_finite(grads)
    return loss, grads


def _check_finite(grads):
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient in {name}")


def predict_tags(model: NeuralModel, sentences) -> List[List[str]]:
    out = []
    for s in sentences:
        E = encode_sentence(s, model)
        path = viterbi_decode(E, model.params["transitions"])
        out.append([LABELS[i] for i in path])
    return out


def predict_neural(model: NeuralModel, document: Document):
    return document_spans(document, predict_tags(model, document.sentences))


def _dev_f1(model, dev) -> float:
    from clinex.evaluate import evaluate

    gold, pred = [], []
    predicted = predict_tags(model, [s for s, _ in dev])
    for k, ((sent, tags), guess) in enumerate(zip(dev, predicted)):
        gold += iob_to_spans(tags, sent, str(k))
        pred += iob_to_spans(guess, sent, str(k))
    return evaluate(gold, pred).micro.f1


def train_neural(
    corpus: Sequence[Tuple[Sentence, Sequence[str]]],
    config: Optional[TrainConfig] = None,
    dev: Optional[Sequence[Tuple[Sentence, Sequence[str]]]] = None,
    word_table: Optional[np.ndarray] = None,
    vocab: Optional[Tuple[List[str], List[str]]] = None,
) -> NeuralModel:
    """Mini-batch SGD with global-norm clipping.

    The per-epoch log lands in ``model.training_log``. With a ``dev`` set the
    parameters from the epoch with the best dev F1 are returned.
    """
    config = config or TrainConfig()
    config.validate()
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(config.seed)
    if vocab is None:
        vocab = build_vocabularies([_words(s) for s, _ in corpus])
    char_vocab, word_vocab = vocab
    if word_table is None and config.embedding_path:
        word_table, report = load_word_embeddings(config.embedding_path, word_vocab, rng)
        if report.dim != config.d_w:
            raise ValueError(f"embedding width {report.dim} does not match d_w={config.d_w}")
        log.info("embeddings: %d/%d vocabulary hits", report.hits, report.vocab_size)
    model = NeuralModel.initialize(config, char_vocab, word_vocab, word_table, rng)
    best_f1, best_params = -1.0, None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(corpus))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [corpus[i] for i in order[start : start + config.batch_size]]
            loss, grads = _loss_and_grads(model, batch, train=True, rng=rng)
            if not math.isfinite(loss) or loss > 1e6:
                raise NumericalError(f"training diverged at epoch {epoch}: batch loss {loss}")
            _check_finite(grads)
            total += loss
            _sgd_step(model, grads, config)
        entry = {"epoch": epoch, "loss": total}
        if dev:
            entry["dev_f1"] = _dev_f1(model, dev)
            if entry["dev_f1"] > best_f1:
                best_f1, best_params = entry["dev_f1"], copy.deepcopy(model.params)
        model.training_log.append(entry)
        log.info("lstm epoch %d %s", epoch, entry)
    if best_params is not None:
        model.params = best_params
    return model


def _sgd_step(model: NeuralModel, grads, config: TrainConfig):
    names = [n for n in PARAM_NAMES if not (n == "word_emb" and config.freeze_word_embeddings)]
    norm = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))
    scale = config.learning_rate
    if norm > config.clip_norm:
        scale *= config.clip_norm / norm
    for n in names:
        model.params[n] -= scale * grads[n]
