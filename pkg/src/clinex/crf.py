"""Linear-chain CRF over the seven IOB labels.

Emission scores come from sparse binary features times a weight matrix;
transitions live in a 9x9 matrix whose last two rows/columns are the START
and STOP states. All inference is done in log space with float64.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from clinex.corpus import LABEL_INDEX, LABELS, Sentence
from clinex.errors import FormatError, ModelVersionError, NumericalError
from clinex.features import FeatureVector, Lexicon, extract_features

log = logging.getLogger(__name__)

N_LABELS = len(LABELS)
START = N_LABELS
STOP = N_LABELS + 1
N_STATES = N_LABELS + 2

CRF_FORMAT = "clinex-crf"
CRF_FORMAT_VERSION = 1


def _as_indices(tags) -> np.ndarray:
    return np.asarray([LABEL_INDEX[t] if isinstance(t, str) else int(t) for t in tags], dtype=np.intp)


def _logsumexp(a: np.ndarray, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else out.item()


def score_sequence(emissions: np.ndarray, transitions: np.ndarray, tags) -> float:
    emissions = np.asarray(emissions, dtype=np.float64)
    y = _as_indices(tags)
    if len(y) != emissions.shape[0]:
        raise ValueError(f"{len(y)} tags for a lattice of length {emissions.shape[0]}")
    score = transitions[START, y[0]] + transitions[y[-1], STOP]
    score += emissions[np.arange(len(y)), y].sum()
    score += transitions[y[:-1], y[1:]].sum()
    return float(score)


def _forward(emissions, transitions):
    T = emissions.shape[0]
    pair = transitions[:N_LABELS, :N_LABELS]
    alpha = np.empty((T, N_LABELS))
    alpha[0] = transitions[START, :N_LABELS] + emissions[0]
    for t in range(1, T):
        alpha[t] = _logsumexp(alpha[t - 1][:, None] + pair, axis=0) + emissions[t]
    log_z = _logsumexp(alpha[-1] + transitions[:N_LABELS, STOP])
    return alpha, log_z


def _backward(emissions, transitions):
    T = emissions.shape[0]
    pair = transitions[:N_LABELS, :N_LABELS]
    beta = np.empty((T, N_LABELS))
    beta[-1] = transitions[:N_LABELS, STOP]
    for t in range(T - 2, -1, -1):
        beta[t] = _logsumexp(pair + (emissions[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def forward_log_partition(emissions: np.ndarray, transitions: np.ndarray) -> float:
    """log of the summed exp-score over all label sequences."""
    emissions = np.asarray(emissions, dtype=np.float64)
    if emissions.ndim != 2 or emissions.shape[0] < 1:
        raise ValueError("lattice must be a non-empty T x 7 matrix")
    return _forward(emissions, transitions)[1]


def posterior_marginals(emissions: np.ndarray, transitions: np.ndarray):
    """Node marginals (T x 7) and edge marginals ((T-1) x 7 x 7) by forward-backward."""
    emissions = np.asarray(emissions, dtype=np.float64)
    alpha, log_z = _forward(emissions, transitions)
    beta = _backward(emissions, transitions)
    node = np.exp(alpha + beta - log_z)
    pair = transitions[:N_LABELS, :N_LABELS]
    edge = np.exp(
        alpha[:-1, :, None] + pair[None] + (emissions[1:] + beta[1:])[:, None, :] - log_z
    )
    return node, edge


def viterbi_decode(emissions: np.ndarray, transitions: np.ndarray) -> List[int]:
    """Best label-index path. Ties go to the lower label at the latest position."""
    emissions = np.asarray(emissions, dtype=np.float64)
    T = emissions.shape[0]
    if T < 1:
        raise ValueError("empty lattice")
    pair = transitions[:N_LABELS, :N_LABELS]
    delta = transitions[START, :N_LABELS] + emissions[0]
    back = np.zeros((T, N_LABELS), dtype=np.intp)
    for t in range(1, T):
        cand = delta[:, None] + pair
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(N_LABELS)] + emissions[t]
    best = int(np.argmax(delta + transitions[:N_LABELS, STOP]))
    path = [best]
    for t in range(T - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    return path[::-1]


def _sentence_terms(emissions, transitions, gold):
    """NLL of one sentence plus d(NLL)/d(emissions) and d(NLL)/d(transitions)."""
    alpha, log_z = _forward(emissions, transitions)
    beta = _backward(emissions, transitions)
    node = np.exp(alpha + beta - log_z)
    T = emissions.shape[0]
    d_trans = np.zeros((N_STATES, N_STATES))
    d_trans[START, :N_LABELS] += node[0]
    d_trans[:N_LABELS, STOP] += node[-1]
    if T > 1:
        pair = transitions[:N_LABELS, :N_LABELS]
        edge = np.exp(
            alpha[:-1, :, None] + pair[None] + (emissions[1:] + beta[1:])[:, None, :] - log_z
        )
        d_trans[:N_LABELS, :N_LABELS] += edge.sum(axis=0)
        np.add.at(d_trans, (gold[:-1], gold[1:]), -1.0)
    d_trans[START, gold[0]] -= 1.0
    d_trans[gold[-1], STOP] -= 1.0
    d_emit = node
    d_emit[np.arange(T), gold] -= 1.0
    nll = log_z - score_sequence(emissions, transitions, gold)
    return nll, d_emit, d_trans


@dataclass
class CrfTrainConfig:
    epochs: int = 50
    learning_rate: float = 0.1
    decay: float = 0.9
    l2_lambda: float = 1e-4
    batch_size: int = 8
    grad_tol: float = 1e-5
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (self.learning_rate > 0 and 0 < self.decay <= 1):
            raise ValueError("learning_rate must be > 0 and decay in (0, 1]")
        if not self.l2_lambda >= 0:
            raise ValueError("l2_lambda must be non-negative")


@dataclass
class CrfGradient:
    emission: np.ndarray
    transitions: np.ndarray


@dataclass
class CrfModel:
    features: List[str]
    emission_weights: np.ndarray
    transition_weights: np.ndarray = field(default_factory=lambda: np.zeros((N_STATES, N_STATES)))
    l2_lambda: float = 1e-4
    labels: Tuple[str, ...] = LABELS
    lexicon: Optional[Lexicon] = None
    config: Dict = field(default_factory=dict)
    training_log: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.feature_index = {f: i for i, f in enumerate(self.features)}
        self.emission_weights = np.asarray(self.emission_weights, dtype=np.float64).reshape(
            len(self.features), N_LABELS
        )
        self.transition_weights = np.asarray(self.transition_weights, dtype=np.float64)
        if self.transition_weights.shape != (N_STATES, N_STATES):
            raise ValueError("transition matrix must be 9 x 9")

    @classmethod
    def zeros(cls, features: Iterable[str], l2_lambda: float = 1e-4, **kw) -> "CrfModel":
        features = list(features)
        return cls(features, np.zeros((len(features), N_LABELS)), l2_lambda=l2_lambda, **kw)

    def featurize(self, sentence: Sentence, pos_tags=None) -> List[FeatureVector]:
        return extract_features(sentence, self.lexicon, pos_tags=pos_tags)

    def design_matrix(self, feature_vectors: Sequence[FeatureVector]) -> sp.csr_matrix:
        return _design_matrix([feature_vectors], self.feature_index)

    def lattice(self, feature_vectors: Sequence[FeatureVector]) -> np.ndarray:
        return np.asarray(self.design_matrix(feature_vectors) @ self.emission_weights)

    def predict(self, feature_vectors: Sequence[FeatureVector]) -> List[str]:
        path = viterbi_decode(self.lattice(feature_vectors), self.transition_weights)
        return [self.labels[i] for i in path]

    def tag(self, sentence: Sentence, pos_tags=None) -> List[str]:
        return self.predict(self.featurize(sentence, pos_tags))

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> Dict:
        return {
            "format": CRF_FORMAT,
            "version": CRF_FORMAT_VERSION,
            "labels": list(self.labels),
            "l2_lambda": self.l2_lambda,
            "config": self.config,
            "training_log": self.training_log,
            "transition_weights": self.transition_weights.tolist(),
            "lexicon": self.lexicon.dumps() if self.lexicon is not None else None,
            "features": self.features,
            "emission_weights": self.emission_weights.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, data: Dict) -> "CrfModel":
        if data.get("format") != CRF_FORMAT:
            raise FormatError(f"not a CRF model file (format={data.get('format')!r})")
        if data.get("version") != CRF_FORMAT_VERSION:
            raise ModelVersionError(CRF_FORMAT_VERSION, data.get("version"))
        if tuple(data["labels"]) != LABELS:
            raise FormatError(f"unexpected label alphabet {data['labels']}")
        lex = data.get("lexicon")
        return cls(
            features=list(data["features"]),
            emission_weights=np.asarray(data["emission_weights"], dtype=np.float64).reshape(-1, N_LABELS),
            transition_weights=np.asarray(data["transition_weights"], dtype=np.float64),
            l2_lambda=float(data["l2_lambda"]),
            lexicon=Lexicon.from_lines(lex.splitlines()) if lex is not None else None,
            config=dict(data.get("config", {})),
            training_log=list(data.get("training_log", [])),
        )

    @classmethod
    def loads(cls, text: str) -> "CrfModel":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "CrfModel":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def feature_key(feature) -> str:
    ns, value = feature
    return f"{ns}={value}"


def _design_matrix(sentences: Sequence[Sequence[FeatureVector]], index: Dict[str, int]) -> sp.csr_matrix:
    indptr = [0]
    cols: List[int] = []
    for fvs in sentences:
        for fv in fvs:
            ids = sorted({index[k] for k in map(feature_key, fv) if k in index})
            cols.extend(ids)
            indptr.append(len(cols))
    data = np.ones(len(cols))
    return sp.csr_matrix(
        (data, np.asarray(cols, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
        shape=(len(indptr) - 1, len(index)),
    )


class _Compiled:
    """Training batch flattened into one design matrix with sentence offsets."""

    def __init__(self, sentences, tag_seqs, index):
        self.X = _design_matrix(sentences, index)
        self.lengths = np.array([len(f) for f in sentences], dtype=np.intp)
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        self.gold = [_as_indices(t) for t in tag_seqs]
        for fvs, g in zip(sentences, self.gold):
            if len(fvs) != len(g) or len(g) == 0:
                raise ValueError("each example needs one tag per token and at least one token")

    def rows(self, which: Sequence[int]) -> np.ndarray:
        return np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in which])


def _padded_terms(E, lengths, gold, A):
    """Vectorized NLL and gradients for a padded batch.

    ``E`` is B x T x 7 (padding rows ignored), ``gold`` is B x T. Returns the
    summed NLL, d/dE (zero on padding) and d/dA.
    """
    B, T, _ = E.shape
    mask = np.arange(T)[None, :] < lengths[:, None]
    pair = A[:N_LABELS, :N_LABELS]
    start, stop = A[START, :N_LABELS], A[:N_LABELS, STOP]
    alpha = np.empty((B, T, N_LABELS))
    alpha[:, 0] = start + E[:, 0]
    for t in range(1, T):
        new = _logsumexp(alpha[:, t - 1, :, None] + pair, axis=1) + E[:, t]
        alpha[:, t] = np.where(mask[:, t, None], new, alpha[:, t - 1])
    log_z = _logsumexp(alpha[:, -1] + stop, axis=1)
    beta = np.empty((B, T, N_LABELS))
    beta[:, -1] = stop
    for t in range(T - 2, -1, -1):
        new = _logsumexp(pair + (E[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
        beta[:, t] = np.where(mask[:, t + 1, None], new, stop)
    node = np.exp(alpha + beta - log_z[:, None, None]) * mask[:, :, None]

    rows = np.arange(B)
    last = lengths - 1
    g_safe = np.where(mask, gold, 0)
    gold_score = (
        start[g_safe[:, 0]]
        + stop[g_safe[rows, last]]
        + np.sum(np.take_along_axis(E, g_safe[:, :, None], axis=2)[:, :, 0] * mask, axis=1)
        + np.sum(pair[g_safe[:, :-1], g_safe[:, 1:]] * mask[:, 1:], axis=1)
    )
    d_trans = np.zeros((N_STATES, N_STATES))
    d_trans[START, :N_LABELS] = node[:, 0].sum(axis=0)
    d_trans[:N_LABELS, STOP] = node[rows, last].sum(axis=0)
    if T > 1:
        edge = np.exp(
            alpha[:, :-1, :, None]
            + pair
            + (E[:, 1:] + beta[:, 1:])[:, :, None, :]
            - log_z[:, None, None, None]
        )
        d_trans[:N_LABELS, :N_LABELS] = np.einsum("btij,bt->ij", edge, mask[:, 1:].astype(float))
        emp = np.zeros(N_LABELS * N_LABELS)
        flat = (g_safe[:, :-1] * N_LABELS + g_safe[:, 1:])[mask[:, 1:]]
        emp += np.bincount(flat, minlength=N_LABELS * N_LABELS)
        d_trans[:N_LABELS, :N_LABELS] -= emp.reshape(N_LABELS, N_LABELS)
    d_trans[START, :N_LABELS] -= np.bincount(g_safe[:, 0], minlength=N_LABELS)
    d_trans[:N_LABELS, STOP] -= np.bincount(g_safe[rows, last], minlength=N_LABELS)
    d_emit = node
    onehot = np.zeros_like(node)
    np.put_along_axis(onehot, g_safe[:, :, None], 1.0, axis=2)
    d_emit -= onehot * mask[:, :, None]
    return float(np.sum(log_z - gold_score)), d_emit, d_trans


def _batch_terms(W, A, data: _Compiled, which: Sequence[int]):
    """Summed NLL and data gradient over the sentences ``which`` (no L2)."""
    which = np.asarray(list(which), dtype=np.intp)
    rows = data.rows(which)
    X = data.X[rows]
    E_flat = np.asarray(X @ W)
    lengths = data.lengths[which]
    T = int(lengths.max())
    mask = np.arange(T)[None, :] < lengths[:, None]
    E = np.zeros((len(which), T, N_LABELS))
    E[mask] = E_flat
    gold = np.zeros((len(which), T), dtype=np.intp)
    gold[mask] = np.concatenate([data.gold[i] for i in which])
    nll, d_emit, d_trans = _padded_terms(E, lengths, gold, A)
    g_emit = np.asarray(X.T @ d_emit[mask])
    return nll, g_emit, d_trans


def nll_and_gradient(model: CrfModel, batch) -> Tuple[float, CrfGradient]:
    """Penalized negative log-likelihood of ``batch`` and its gradient.

    ``batch`` is a list of ``(feature_vectors, tags)`` pairs. The loss is
    the summed per-sentence NLL plus ``l2_lambda * ||w||^2 / 2`` over all
    emission and transition weights.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    data = _Compiled([b[0] for b in batch], [b[1] for b in batch], model.feature_index)
    W, A = model.emission_weights, model.transition_weights
    nll, g_emit, g_trans = _batch_terms(W, A, data, range(len(batch)))
    lam = model.l2_lambda
    loss = nll + 0.5 * lam * (np.sum(W * W) + np.sum(A * A))
    return float(loss), CrfGradient(g_emit + lam * W, g_trans + lam * A)


def _objective(W, A, data, lam):
    nll, g_emit, g_trans = _batch_terms(W, A, data, range(len(data.gold)))
    loss = nll + 0.5 * lam * (np.sum(W * W) + np.sum(A * A))
    grad_norm = math.sqrt(np.sum((g_emit + lam * W) ** 2) + np.sum((g_trans + lam * A) ** 2))
    return loss, grad_norm


def fit_crf(
    feature_seqs: Sequence[Sequence[FeatureVector]],
    tag_seqs: Sequence[Sequence],
    config: Optional[CrfTrainConfig] = None,
    lexicon: Optional[Lexicon] = None,
) -> CrfModel:
    """Mini-batch training on precomputed features.

    Each step moves along the mean batch gradient and then applies the L2
    penalty as a proximal shrink, so very large ``l2_lambda`` stays stable.
    """
    config = config or CrfTrainConfig()
    config.validate()
    if not feature_seqs:
        raise ValueError("empty training corpus")
    vocab = sorted({feature_key(f) for fvs in feature_seqs for fv in fvs for f in fv})
    model = CrfModel.zeros(vocab, l2_lambda=config.l2_lambda, lexicon=lexicon, config=asdict(config))
    data = _Compiled(feature_seqs, tag_seqs, model.feature_index)
    W, A = model.emission_weights, model.transition_weights
    n = len(data.gold)
    rng = np.random.default_rng(config.seed)
    shrink_rate = config.l2_lambda / n
    lr = config.learning_rate
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            which = order[start : start + config.batch_size]
            _, g_emit, g_trans = _batch_terms(W, A, data, which)
            step = lr / len(which)
            W -= step * g_emit
            A -= step * g_trans
            shrink = 1.0 / (1.0 + lr * shrink_rate)
            W *= shrink
            A *= shrink
        loss, grad_norm = _objective(W, A, data, config.l2_lambda)
        if not math.isfinite(loss):
            raise NumericalError(f"CRF training loss became {loss} at epoch {epoch}")
        model.training_log.append(loss)
        log.info("crf epoch %d loss %.6f grad_norm %.3e lr %.4g", epoch, loss, grad_norm, lr)
        if grad_norm < config.grad_tol:
            break
        lr *= config.decay
    return model


def train_crf(
    corpus: Sequence[Tuple[Sentence, Sequence[str]]],
    config: Optional[CrfTrainConfig] = None,
    lexicon: Optional[Lexicon] = None,
    pos_tags: Optional[Sequence[Optional[Sequence[str]]]] = None,
) -> CrfModel:
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty training corpus")
    pos_tags = pos_tags or [None] * len(corpus)
    feats = [extract_features(s, lexicon, pos_tags=p) for (s, _), p in zip(corpus, pos_tags)]
    return fit_crf(feats, [t for _, t in corpus], config, lexicon)
