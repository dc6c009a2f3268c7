"""Caption-likeness scoring and similarity-based selection of parallel pairs."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

HASH_DIM = 1 << 16
CHAR_NGRAMS = (3, 4, 5)
DEFAULT_TOKEN_CAP = 450


def _bucket(feature: str, salt: int) -> int:
    return zlib.crc32(feature.encode("utf-8"), salt) % HASH_DIM


def featurize(sentence: str, dim: int = HASH_DIM) -> dict[int, float]:
    """Hashed word unigrams and character 3-5-grams, L2-normalised counts."""
    counts: dict[int, float] = {}
    words = sentence.split()
    for w in words:
        h = _bucket(w, 1) % dim
        counts[h] = counts.get(h, 0.0) + 1.0
    padded = " " + " ".join(words) + " "
    if words:
        for n in CHAR_NGRAMS:
            for i in range(len(padded) - n + 1):
                h = _bucket(padded[i:i + n], 2) % dim
                counts[h] = counts.get(h, 0.0) + 1.0
    norm = np.sqrt(sum(v * v for v in counts.values()))
    return {k: v / norm for k, v in counts.items()} if norm else {}


def feature_matrix(sentences: Sequence[str], dim: int = HASH_DIM) -> sparse.csr_matrix:
    rows, cols, vals = [], [], []
    for r, s in enumerate(sentences):
        for c, v in sorted(featurize(s, dim).items()):
            rows.append(r)
            cols.append(c)
            vals.append(v)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(sentences), dim))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class CaptionClassifier:
    weights: np.ndarray
    bias: float
    heldout_f1: float | None = None

    @classmethod
    def zeros(cls, dim: int = HASH_DIM) -> "CaptionClassifier":
        return cls(np.zeros(dim), 0.0)

    def predict_proba(self, sentences: Sequence[str]) -> np.ndarray:
        return _sigmoid(feature_matrix(sentences, len(self.weights)) @ self.weights + self.bias)


def f1_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def train_caption_classifier(positives: Sequence[str], negatives: Sequence[str], steps: int = 300,
                             lr: float = 2.0, seed: int = 0, heldout_fraction: float = 0.2,
                             l2: float = 1e-4) -> CaptionClassifier:
    """Full-batch logistic regression; a seeded held-out split gives ``heldout_f1``."""
    if not positives or not negatives:
        raise ValueError("both classes need at least one sentence")
    sentences = list(positives) + list(negatives)
    labels = np.array([1.0] * len(positives) + [0.0] * len(negatives))
    order = np.random.default_rng(seed).permutation(len(sentences))
    n_held = int(round(heldout_fraction * len(sentences)))
    held, train = order[:n_held], order[n_held:]
    if len(train) == 0:
        train = held
    X = feature_matrix([sentences[i] for i in train])
    y = labels[train]
    w = np.zeros(HASH_DIM)
    b = 0.0
    n = len(y)
    for _ in range(steps):
        p = _sigmoid(X @ w + b)
        err = p - y
        w -= lr * (X.T @ err / n + l2 * w)
        b -= lr * float(err.mean())
    clf = CaptionClassifier(w, b)
    if n_held:
        pred = clf.predict_proba([sentences[i] for i in held]) >= 0.5
        clf.heldout_f1 = f1_score(labels[held] > 0.5, pred)
    return clf


def score_captionness(clf: CaptionClassifier, sentence: str) -> float:
    return float(clf.predict_proba([sentence])[0])


@dataclass(frozen=True)
class ScoredPair:
    source: str
    target: str
    lang: str
    captionness: float = 0.0
    similarity: float = 0.0

    def __post_init__(self):
        for name in ("captionness", "similarity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} {v} outside [0, 1]")


def whitespace_tokens(pair) -> int:
    return len(pair[0].split()) + len(pair[1].split())


def _top_k_per_lang(scored: list[tuple[float, int, ScoredPair]], k: int) -> list[ScoredPair]:
    by_lang: dict[str, list] = {}
    for entry in scored:
        by_lang.setdefault(entry[2].lang, []).append(entry)
    out = []
    for entries in by_lang.values():
        entries.sort(key=lambda e: (-e[0], e[1]))
        out.extend(e[2] for e in entries[:max(k, 0)])
    return out


def select_caption_like(pool: Sequence, clf: CaptionClassifier, k: int, token_cap: int = DEFAULT_TOKEN_CAP,
                        token_count: Callable = whitespace_tokens) -> list[ScoredPair]:
    """Top ``k`` pairs per language by captionness of the English (source) side.

    Pairs longer than ``token_cap`` tokens (both sides together) are dropped
    first.  Ties keep pool order.
    """
    if not pool:
        raise ValueError("empty pool")
    triples = [(p.source, p.target, p.lang) if isinstance(p, ScoredPair) else tuple(p[:3]) for p in pool]
    kept = [(idx, p) for idx, p in enumerate(triples) if token_count(p) <= token_cap]
    if not kept:
        return []
    probs = clf.predict_proba([p[0] for _, p in kept])
    scored = []
    for (idx, (src, tgt, lang)), s in zip(kept, probs):
        scored.append((float(s), idx, ScoredPair(src, tgt, lang, float(s))))
    return _top_k_per_lang(scored, k)


def greedy_match_f1(src_vectors: np.ndarray, tgt_vectors: np.ndarray) -> tuple[float, float, float]:
    """Greedy max-cosine matching without importance weights.

    Precision averages, over target tokens, the best cosine to any source
    token; recall does the same from the source side.  Per-token maxima are
    floored at 0.
    """
    src = np.asarray(src_vectors, dtype=np.float64)
    tgt = np.asarray(tgt_vectors, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or not len(src) or not len(tgt):
        raise ValueError("both sides need at least one vector")
    s_norm = np.linalg.norm(src, axis=1)
    t_norm = np.linalg.norm(tgt, axis=1)
    if np.any(s_norm == 0) or np.any(t_norm == 0):
        raise ValueError("degenerate embedding")
    cos = (src / s_norm[:, None]) @ (tgt / t_norm[:, None]).T
    precision = float(np.clip(cos.max(axis=0), 0.0, 1.0).mean())
    recall = float(np.clip(cos.max(axis=1), 0.0, 1.0).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


EmbedFn = Callable[[str, str], np.ndarray]


def filter_by_similarity(pairs: Sequence[ScoredPair], embed: EmbedFn, k: int,
                         source_lang: str = "en") -> list[ScoredPair]:
    """Top ``k`` pairs per language by greedy-match F1; ties keep input order.

    ``embed(sentence, lang)`` returns one vector per token.
    """
    scored = []
    for idx, p in enumerate(pairs):
        _, _, f1 = greedy_match_f1(embed(p.source, source_lang), embed(p.target, p.lang))
        scored.append((f1, idx, replace(p, similarity=min(max(f1, 0.0), 1.0))))
    return _top_k_per_lang(scored, k)


def read_pair_pool(path: str | Path) -> list[tuple[str, str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ValueError(f"{path}:{n}: expected source<TAB>target<TAB>langtag")
            out.append((parts[0], parts[1], parts[2]))
    return out


def write_scored_pairs(pairs: Iterable[ScoredPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.source}\t{p.target}\t{p.lang}\t{p.captionness!r}\t{p.similarity!r}\n")
