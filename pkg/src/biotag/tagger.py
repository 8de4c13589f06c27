"""Linear-chain CRF sequence tagger over the {B, I, O} label set.

Token representation is a pluggable feature extractor producing string-keyed
indicator features; the model holds per-feature emission weights plus
transition, start, and end scores. Invalid moves (starting at I, O -> I) are
hard constraints held at -inf and never trained.

Training is plain mini-batch gradient descent on the negative log-likelihood
(computed by forward-backward), with per-epoch seeded shuffling and
checkpoint selection on validation mention-level micro-F1. Everything is
deterministic for a fixed seed.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import TaggedSentence, from_iob
from .metrics import strict_prf
from .textprep import is_punct_token, nfkc

LABELS = ("B", "I", "O")
LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}
_B, _I, _O = 0, 1, 2

#: allowed start labels and transitions (I never opens a mention run)
START_ALLOWED = np.array([True, False, True])
TRANS_ALLOWED = np.array(
    [
        [True, True, True],
        [True, True, True],
        [True, False, True],  # O -> I forbidden
    ]
)

MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Model file with an unknown or incompatible format."""


# ---------------------------------------------------------------------------
# features


def word_shape(text: str) -> str:
    return "".join(
        "A" if ch.isupper() else "a" if ch.islower() else "d" if ch.isdigit() else ch for ch in text
    )


def _token_features(text: str) -> list[str]:
    feats = [f"w={text.lower()}", f"shape={word_shape(text)}"]
    for k in (1, 2, 3):
        if len(text) >= k:
            feats.append(f"pre{k}={text[:k]}")
            feats.append(f"suf{k}={text[-k:]}")
    if text.isdigit():
        feats.append("isdigit")
    if is_punct_token(text):
        feats.append("ispunct")
    return feats


def extract_features(tokens: Sequence[str], position: int) -> list[str]:
    """Feature keys for one token: identity/shape/affix templates for window
    offsets -2..+2 (boundary offsets emit sentinels) plus a bias feature."""
    if not 0 <= position < len(tokens):
        raise IndexError(f"position {position} out of range")
    feats = ["bias"]
    for off in range(-2, 3):
        p = position + off
        prefix = f"[{off:+d}]"
        if p < 0:
            feats.append(f"{prefix}<bos>")
        elif p >= len(tokens):
            feats.append(f"{prefix}<eos>")
        else:
            feats.extend(prefix + f for f in _token_features(nfkc(tokens[p])))
    return feats


class FeatureEncoder:
    """Maps feature keys to column indices; unseen keys are dropped at encode
    time (they carry zero weight by definition)."""

    def __init__(self, feature_index: dict[str, int]):
        self.feature_index = feature_index

    @classmethod
    def build(cls, corpus: Sequence[TaggedSentence]) -> "FeatureEncoder":
        index: dict[str, int] = {}
        for sent in corpus:
            texts = [t.text for t in sent.tokens]
            for pos in range(len(texts)):
                for feat in extract_features(texts, pos):
                    if feat not in index:
                        index[feat] = len(index)
        return cls(index)

    def __len__(self) -> int:
        return len(self.feature_index)

    def encode(self, token_texts: Sequence[str]) -> "EncodedSentence":
        ids: list[int] = []
        offsets: list[int] = []
        counts: list[int] = []
        for pos in range(len(token_texts)):
            offsets.append(len(ids))
            known = [
                self.feature_index[f]
                for f in extract_features(token_texts, pos)
                if f in self.feature_index
            ]
            ids.extend(known)
            counts.append(len(known))
        return EncodedSentence(
            ids=np.asarray(ids, dtype=np.int64),
            offsets=np.asarray(offsets, dtype=np.int64),
            counts=np.asarray(counts, dtype=np.int64),
            length=len(token_texts),
        )


@dataclass(frozen=True)
class EncodedSentence:
    ids: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray
    length: int
    labels: np.ndarray | None = None


# ---------------------------------------------------------------------------
# model


@dataclass
class CRFModel:
    feature_index: dict[str, int]
    weights: np.ndarray  # (n_features, 3)
    transitions: np.ndarray  # (3, 3), -inf where forbidden
    start: np.ndarray  # (3,), -inf at I
    end: np.ndarray  # (3,)
    meta: dict = field(default_factory=dict)

    labels = LABELS

    @property
    def encoder(self) -> FeatureEncoder:
        return FeatureEncoder(self.feature_index)

    def copy_params(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.weights.copy(), self.transitions.copy(), self.start.copy(), self.end.copy()


def new_model(feature_index: dict[str, int]) -> CRFModel:
    n = len(feature_index)
    transitions = np.zeros((3, 3))
    transitions[~TRANS_ALLOWED] = -np.inf
    start = np.zeros(3)
    start[~START_ALLOWED] = -np.inf
    return CRFModel(
        feature_index=dict(feature_index),
        weights=np.zeros((n, 3)),
        transitions=transitions,
        start=start,
        end=np.zeros(3),
    )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 30
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


@dataclass(frozen=True)
class DecodeResult:
    path: tuple[str, ...]
    score: float  # unnormalized score of the decoded path
    log_z: float
    marginals: np.ndarray  # (len, 3) per-token posteriors


@dataclass
class Gradients:
    weights: np.ndarray
    transitions: np.ndarray
    start: np.ndarray
    end: np.ndarray


# ---------------------------------------------------------------------------
# numerics


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m_safe), axis=axis)) + np.squeeze(m_safe, axis=axis)
    return np.where(np.isfinite(np.squeeze(m, axis=axis)), out, -np.inf)


def _emissions(weights: np.ndarray, enc: EncodedSentence) -> np.ndarray:
    if enc.length == 0:
        return np.zeros((0, 3))
    return np.add.reduceat(weights[enc.ids], enc.offsets, axis=0)


def _pad_batch(
    weights: np.ndarray, encs: Sequence[EncodedSentence]
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    lengths = np.array([e.length for e in encs], dtype=np.int64)
    t_max = int(lengths.max())
    em = np.zeros((len(encs), t_max, 3))
    labels = None
    if all(e.labels is not None for e in encs):
        labels = np.zeros((len(encs), t_max), dtype=np.int64)
    for b, enc in enumerate(encs):
        em[b, : enc.length] = _emissions(weights, enc)
        if labels is not None:
            labels[b, : enc.length] = enc.labels
    return em, lengths, labels


def _forward(
    em: np.ndarray, lengths: np.ndarray, trans: np.ndarray, start: np.ndarray, end_vec: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n_batch, t_max, _ = em.shape
    alphas = np.empty_like(em)
    alphas[:, 0] = start[None, :] + em[:, 0]
    for t in range(1, t_max):
        prev = alphas[:, t - 1]
        new = _logsumexp(prev[:, :, None] + trans[None], axis=1) + em[:, t]
        alphas[:, t] = np.where((t < lengths)[:, None], new, prev)
    log_z = _logsumexp(alphas[:, -1] + end_vec[None, :], axis=1)
    return alphas, log_z


def _backward(
    em: np.ndarray, lengths: np.ndarray, trans: np.ndarray, end_vec: np.ndarray
) -> np.ndarray:
    n_batch, t_max, _ = em.shape
    betas = np.full_like(em, -np.inf)
    betas[np.arange(n_batch), lengths - 1] = end_vec
    for t in range(t_max - 2, -1, -1):
        nxt = em[:, t + 1] + betas[:, t + 1]
        val = _logsumexp(trans[None] + nxt[:, None, :], axis=2)
        betas[:, t] = np.where((t < lengths - 1)[:, None], val, betas[:, t])
    return betas


def _gold_scores(
    em: np.ndarray,
    lengths: np.ndarray,
    labels: np.ndarray,
    trans: np.ndarray,
    start: np.ndarray,
    end_vec: np.ndarray,
) -> np.ndarray:
    n_batch, t_max, _ = em.shape
    rows = np.arange(n_batch)
    score = start[labels[:, 0]] + em[rows, 0, labels[:, 0]]
    for t in range(1, t_max):
        step = trans[labels[:, t - 1], labels[:, t]] + em[rows, t, labels[:, t]]
        score = score + np.where(t < lengths, step, 0.0)
    score = score + end_vec[labels[rows, lengths - 1]]
    return score


def _squared_norm(weights: np.ndarray, trans: np.ndarray, start: np.ndarray, end_vec: np.ndarray) -> float:
    return float(
        np.sum(weights**2)
        + np.sum(trans[TRANS_ALLOWED] ** 2)
        + np.sum(start[START_ALLOWED] ** 2)
        + np.sum(end_vec**2)
    )


def _nll_and_grad_encoded(
    weights: np.ndarray,
    trans: np.ndarray,
    start: np.ndarray,
    end_vec: np.ndarray,
    encs: Sequence[EncodedSentence],
    l2: float,
) -> tuple[float, Gradients]:
    encs = [e for e in encs if e.length > 0]
    if not encs:
        raise ValueError("empty batch")
    em, lengths, labels = _pad_batch(weights, encs)
    if labels is None:
        raise ValueError("batch sentences must carry gold labels")
    n_batch, t_max, _ = em.shape
    rows = np.arange(n_batch)

    alphas, log_z = _forward(em, lengths, trans, start, end_vec)
    betas = _backward(em, lengths, trans, end_vec)
    gold = _gold_scores(em, lengths, labels, trans, start, end_vec)
    loss = float(np.sum(log_z - gold))

    with np.errstate(invalid="ignore"):
        unary = np.exp(alphas + betas - log_z[:, None, None])
    time_mask = np.arange(t_max)[None, :] < lengths[:, None]
    unary = np.where(time_mask[:, :, None], unary, 0.0)

    one_hot = np.zeros_like(unary)
    flat_rows, flat_cols = np.nonzero(time_mask)
    one_hot[flat_rows, flat_cols, labels[flat_rows, flat_cols]] = 1.0
    delta = unary - one_hot

    grad_w = np.zeros_like(weights)
    all_ids = np.concatenate([e.ids for e in encs]) if encs else np.zeros(0, dtype=np.int64)
    all_counts = np.concatenate([e.counts for e in encs])
    delta_tokens = np.concatenate([delta[b, : encs[b].length] for b in range(n_batch)], axis=0)
    np.add.at(grad_w, all_ids, np.repeat(delta_tokens, all_counts, axis=0))

    grad_start = unary[:, 0].sum(axis=0) - np.bincount(labels[:, 0], minlength=3).astype(float)
    last = labels[rows, lengths - 1]
    grad_end = unary[rows, lengths - 1].sum(axis=0) - np.bincount(last, minlength=3).astype(float)

    grad_trans = np.zeros((3, 3))
    if t_max > 1:
        pair = (
            alphas[:, :-1, :, None]
            + trans[None, None]
            + (em[:, 1:] + betas[:, 1:])[:, :, None, :]
            - log_z[:, None, None, None]
        )
        pair_mask = np.arange(t_max - 1)[None, :] < (lengths - 1)[:, None]
        with np.errstate(invalid="ignore"):
            expected = np.where(pair_mask[:, :, None, None], np.exp(pair), 0.0)
        grad_trans = expected.sum(axis=(0, 1))
        emp_rows, emp_cols = np.nonzero(pair_mask)
        np.add.at(grad_trans, (labels[emp_rows, emp_cols], labels[emp_rows, emp_cols + 1]), -1.0)

    if l2 > 0:
        loss += 0.5 * l2 * _squared_norm(weights, trans, start, end_vec)
        grad_w += l2 * weights
        grad_trans = grad_trans + l2 * np.where(TRANS_ALLOWED, trans, 0.0)
        grad_start = grad_start + l2 * np.where(START_ALLOWED, start, 0.0)
        grad_end = grad_end + l2 * end_vec

    grad_trans[~TRANS_ALLOWED] = 0.0
    grad_start[~START_ALLOWED] = 0.0
    return loss, Gradients(weights=grad_w, transitions=grad_trans, start=grad_start, end=grad_end)


def _encode_corpus(
    encoder: FeatureEncoder, corpus: Sequence[TaggedSentence]
) -> list[EncodedSentence]:
    encoded = []
    for sent in corpus:
        enc = encoder.encode([t.text for t in sent.tokens])
        labels = np.asarray([LABEL_INDEX[tag] for tag in sent.tags], dtype=np.int64)
        encoded.append(
            EncodedSentence(
                ids=enc.ids, offsets=enc.offsets, counts=enc.counts, length=enc.length, labels=labels
            )
        )
    return encoded


def nll_and_gradient(model: CRFModel, batch: Sequence[TaggedSentence]) -> tuple[float, Gradients]:
    """Negative log-likelihood of the batch (plus the L2 term in
    `model.meta['l2']`, when set) and its gradient via forward-backward."""
    if not batch:
        raise ValueError("empty batch")
    for sent in batch:
        if sent.scheme != "untyped":
            raise ValueError("tagger operates on untyped {B, I, O} corpora")
    encs = _encode_corpus(model.encoder, batch)
    l2 = float(model.meta.get("l2", 0.0))
    return _nll_and_grad_encoded(model.weights, model.transitions, model.start, model.end, encs, l2)


# ---------------------------------------------------------------------------
# decoding


def _viterbi_arrays(
    em: np.ndarray, trans: np.ndarray, start: np.ndarray, end_vec: np.ndarray
) -> tuple[list[int], float]:
    t_len = em.shape[0]
    delta = start + em[0]
    backptr = np.zeros((t_len, 3), dtype=np.int64)
    for t in range(1, t_len):
        scores = delta[:, None] + trans
        backptr[t] = np.argmax(scores, axis=0)  # first max index: B < I < O tie-break
        delta = scores[backptr[t], np.arange(3)] + em[t]
    final = delta + end_vec
    last = int(np.argmax(final))
    path = [last]
    for t in range(t_len - 1, 0, -1):
        path.append(int(backptr[t, path[-1]]))
    path.reverse()
    return path, float(final[last])


def decode(model: CRFModel, token_texts: Sequence[str]) -> DecodeResult:
    """Viterbi path plus forward-backward posteriors for one sentence."""
    if not token_texts:
        return DecodeResult(path=(), score=0.0, log_z=0.0, marginals=np.zeros((0, 3)))
    enc = model.encoder.encode(token_texts)
    em = _emissions(model.weights, enc)
    path_idx, score = _viterbi_arrays(em, model.transitions, model.start, model.end)
    em_b = em[None]
    lengths = np.array([enc.length])
    alphas, log_z = _forward(em_b, lengths, model.transitions, model.start, model.end)
    betas = _backward(em_b, lengths, model.transitions, model.end)
    marginals = np.exp(alphas[0] + betas[0] - log_z[0])
    return DecodeResult(
        path=tuple(LABELS[i] for i in path_idx),
        score=score,
        log_z=float(log_z[0]),
        marginals=marginals,
    )


def viterbi(model: CRFModel, token_texts: Sequence[str]) -> DecodeResult:
    return decode(model, token_texts)


def marginals(model: CRFModel, token_texts: Sequence[str]) -> np.ndarray:
    return decode(model, token_texts).marginals


def span_confidence(result: DecodeResult, token_range: tuple[int, int]) -> float:
    """Mean marginal probability of the decoded tag over a token range."""
    first, last = token_range
    if not 0 <= first < last <= len(result.path):
        raise ValueError(f"token range {token_range} out of bounds")
    probs = [result.marginals[t, LABEL_INDEX[result.path[t]]] for t in range(first, last)]
    return float(np.mean(probs))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_f1: float


def _mention_sets(
    corpus: Sequence[TaggedSentence], paths: Sequence[Sequence[str]]
) -> tuple[dict, dict]:
    gold: dict = {}
    pred: dict = {}
    for sent, path in zip(corpus, paths):
        gold[sent.sentence_id] = from_iob(sent)
        predicted = TaggedSentence(
            doc_id=sent.doc_id,
            sentence_index=sent.sentence_index,
            tokens=sent.tokens,
            tags=tuple(path),
            scheme="untyped",
        )
        pred[sent.sentence_id] = from_iob(predicted)
    return gold, pred


def _validation_f1(
    weights: np.ndarray,
    trans: np.ndarray,
    start: np.ndarray,
    end_vec: np.ndarray,
    val_corpus: Sequence[TaggedSentence],
    val_encs: Sequence[EncodedSentence],
) -> float:
    paths = []
    for enc in val_encs:
        if enc.length == 0:
            paths.append([])
            continue
        em = _emissions(weights, enc)
        idx, _ = _viterbi_arrays(em, trans, start, end_vec)
        paths.append([LABELS[i] for i in idx])
    gold, pred = _mention_sets(val_corpus, paths)
    return strict_prf(gold, pred).f1


def train(
    train_corpus: Sequence[TaggedSentence],
    val_corpus: Sequence[TaggedSentence],
    cfg: TrainConfig,
) -> tuple[CRFModel, list[EpochStats]]:
    """Mini-batch gradient descent with a fixed learning rate; returns the
    weights of the epoch with the best validation mention-level micro-F1."""
    if not train_corpus or not val_corpus:
        raise ValueError("train and validation corpora must be non-empty")
    for sent in list(train_corpus) + list(val_corpus):
        if sent.scheme != "untyped":
            raise ValueError("tagger corpora must use the untyped {B, I, O} scheme")

    encoder = FeatureEncoder.build(train_corpus)
    train_encs = _encode_corpus(encoder, train_corpus)
    val_encs = _encode_corpus(encoder, val_corpus)

    model = new_model(encoder.feature_index)
    weights, trans, start, end_vec = model.copy_params()
    rng = random.Random(cfg.seed)
    order = list(range(len(train_encs)))

    history: list[EpochStats] = []
    best_f1 = -1.0
    best_epoch = -1
    best_params: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None

    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        total_loss = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_encs[j] for j in order[i : i + cfg.batch_size]]
            loss, grads = _nll_and_grad_encoded(weights, trans, start, end_vec, batch, cfg.l2)
            total_loss += loss
            weights -= cfg.learning_rate * grads.weights
            trans -= cfg.learning_rate * grads.transitions
            start -= cfg.learning_rate * grads.start
            end_vec -= cfg.learning_rate * grads.end
        val_f1 = _validation_f1(weights, trans, start, end_vec, val_corpus, val_encs)
        history.append(
            EpochStats(epoch=epoch, train_loss=total_loss / len(train_encs), val_f1=val_f1)
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_params = (weights.copy(), trans.copy(), start.copy(), end_vec.copy())

    assert best_params is not None
    model.weights, model.transitions, model.start, model.end = best_params
    model.meta = {
        "config": {
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "epochs": cfg.epochs,
            "l2": cfg.l2,
            "seed": cfg.seed,
        },
        "l2": cfg.l2,
        "best_epoch": best_epoch,
        "best_val_f1": best_f1,
        "n_features": len(encoder.feature_index),
    }
    return model, history


#: hyperparameter grid sampled by random_search
DEFAULT_SEARCH_SPACE: dict[str, tuple] = {
    "learning_rate": (0.001, 0.003, 0.005, 0.01, 0.03, 0.05, 0.1),
    "batch_size": (4, 8, 16, 32, 64, 128),
    "l2": (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0),
}


@dataclass
class TrialResult:
    index: int
    config: TrainConfig
    val_f1: float
    best_epoch: int


@dataclass
class SearchResult:
    trials: list[TrialResult]
    best_index: int
    best_config: TrainConfig
    best_model: CRFModel
    best_history: list[EpochStats]


def random_search(
    train_corpus: Sequence[TaggedSentence],
    val_corpus: Sequence[TaggedSentence],
    k: int = 20,
    seed: int = 0,
    space: dict[str, tuple] | None = None,
    epochs: int = 30,
) -> SearchResult:
    """Sample k configurations without replacement from the grid, train each,
    and keep the model with the best validation micro-F1."""
    space = dict(DEFAULT_SEARCH_SPACE if space is None else space)
    if not space or any(not values for values in space.values()):
        raise ValueError("search space must be non-empty")
    keys = ("learning_rate", "batch_size", "l2")
    grid = [dict(zip(keys, combo)) for combo in itertools.product(*(space[k_] for k_ in keys))]
    rng = random.Random(seed)
    sampled = rng.sample(grid, min(k, len(grid)))

    trials: list[TrialResult] = []
    best: tuple[int, CRFModel, list[EpochStats]] | None = None
    for i, params in enumerate(sampled):
        cfg = TrainConfig(
            learning_rate=params["learning_rate"],
            batch_size=params["batch_size"],
            epochs=epochs,
            l2=params["l2"],
            seed=seed * 100003 + i,
        )
        model, history = train(train_corpus, val_corpus, cfg)
        val_f1 = float(model.meta["best_val_f1"])
        trials.append(
            TrialResult(index=i, config=cfg, val_f1=val_f1, best_epoch=int(model.meta["best_epoch"]))
        )
        if best is None or val_f1 > trials[best[0]].val_f1:
            best = (i, model, history)

    assert best is not None
    best_index, best_model, best_history = best
    return SearchResult(
        trials=trials,
        best_index=best_index,
        best_config=trials[best_index].config,
        best_model=best_model,
        best_history=best_history,
    )


# ---------------------------------------------------------------------------
# persistence


def save_model(model: CRFModel, path: str | Path) -> None:
    features = [None] * len(model.feature_index)
    for feat, idx in model.feature_index.items():
        features[idx] = feat
    payload = {
        "format": "biotag-crf",
        "version": MODEL_FORMAT_VERSION,
        "labels": list(LABELS),
        "features": features,
        "weights": model.weights.tolist(),
        "transitions": model.transitions.tolist(),
        "start": model.start.tolist(),
        "end": model.end.tolist(),
        "meta": model.meta,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path: str | Path) -> CRFModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a model file: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != "biotag-crf":
        raise ModelFormatError(f"{path}: not a biotag CRF model file")
    if payload.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model version {payload.get('version')!r} "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    if tuple(payload["labels"]) != LABELS:
        raise ModelFormatError(f"{path}: unexpected label set {payload['labels']!r}")
    feature_index = {feat: i for i, feat in enumerate(payload["features"])}
    return CRFModel(
        feature_index=feature_index,
        weights=np.asarray(payload["weights"], dtype=float),
        transitions=np.asarray(payload["transitions"], dtype=float),
        start=np.asarray(payload["start"], dtype=float),
        end=np.asarray(payload["end"], dtype=float),
        meta=payload.get("meta", {}),
    )
