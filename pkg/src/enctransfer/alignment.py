"""IBM Model 1 word alignment with pseudo-count priors, grow-diag
symmetrization and projection of word links onto subword positions."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import TokenizedSentence

NULL = "<null>"
LOG_FLOOR = 1e-12
# Fixed E-step chunking; results depend on this, never on the worker count.
EM_CHUNK_PAIRS = 4096

SYMMETRIZATIONS = ("grow-diag", "intersection", "union")

Words = Sequence[str]


def _words(side) -> list[str]:
    return side.split() if isinstance(side, str) else list(side)


def _segment_pairs(pairs) -> list[tuple[list[str], list[str]]]:
    if not pairs:
        raise ValueError("empty pair list")
    out = []
    for n, (src, tgt) in enumerate(pairs, start=1):
        s, t = _words(src), _words(tgt)
        if not s or not t:
            raise ValueError(f"pair on line {n} has an empty side")
        out.append((s, t))
    return out


@dataclass(frozen=True)
class AlignmentLinkSet:
    links: frozenset[tuple[int, int]]
    src_len: int
    tgt_len: int

    def __init__(self, links: Iterable[tuple[int, int]], src_len: int, tgt_len: int):
        links = frozenset((int(i), int(j)) for i, j in links)
        for i, j in links:
            if not (0 <= i < src_len and 0 <= j < tgt_len):
                raise ValueError(f"link ({i},{j}) outside {src_len}x{tgt_len}")
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "src_len", src_len)
        object.__setattr__(self, "tgt_len", tgt_len)

    def __len__(self) -> int:
        return len(self.links)

    def __iter__(self):
        return iter(sorted(self.links))

    def __contains__(self, link) -> bool:
        return tuple(link) in self.links

    def transpose(self) -> "AlignmentLinkSet":
        return AlignmentLinkSet(((j, i) for i, j in self.links), self.tgt_len, self.src_len)

    def to_pharaoh(self) -> str:
        return " ".join(f"{i}-{j}" for i, j in sorted(self.links))

    @classmethod
    def from_pharaoh(cls, line: str, src_len: int, tgt_len: int) -> "AlignmentLinkSet":
        links = []
        for tok in line.split():
            i, j = tok.split("-")
            links.append((int(i), int(j)))
        return cls(links, src_len, tgt_len)


class TranslationTable:
    """Dense lexical table; row 0 of ``prob`` is the NULL source word.

    ``prob[s, t]`` is the probability of generating target word ``t`` from
    source word ``s``; rows sum to one.
    """

    def __init__(self, source_vocab: Sequence[str], target_vocab: Sequence[str], prob: np.ndarray):
        self.source_vocab = [NULL] + [w for w in source_vocab if w != NULL]
        self.target_vocab = list(target_vocab)
        self.src_index = {w: i for i, w in enumerate(self.source_vocab)}
        self.tgt_index = {w: i for i, w in enumerate(self.target_vocab)}
        self.prob = np.asarray(prob, dtype=np.float64)
        if self.prob.shape != (len(self.source_vocab), len(self.target_vocab)):
            raise ValueError("prob shape does not match vocabularies")

    @classmethod
    def uniform(cls, source_vocab, target_vocab) -> "TranslationTable":
        src = [NULL] + [w for w in source_vocab if w != NULL]
        n_t = len(target_vocab)
        return cls(src, target_vocab, np.full((len(src), n_t), 1.0 / n_t))

    def __call__(self, source: str, target: str) -> float:
        i = self.src_index.get(source)
        j = self.tgt_index.get(target)
        if i is None or j is None:
            return 0.0
        return float(self.prob[i, j])

    def lookup(self, source: Words, target: Words) -> np.ndarray:
        """(len(source)+1, len(target)) matrix of probabilities; row 0 is NULL.

        Unknown words get probability 0.
        """
        rows = np.array([0] + [self.src_index.get(w, -1) for w in source])
        cols = np.array([self.tgt_index.get(w, -1) for w in target])
        out = self.prob[np.ix_(np.maximum(rows, 0), np.maximum(cols, 0))].copy()
        out[rows < 0, :] = 0.0
        out[:, cols < 0] = 0.0
        return out

    def save(self, path: str | Path) -> None:
        rows = []
        nz_i, nz_j = np.nonzero(self.prob)
        for i, j in zip(nz_i, nz_j):
            rows.append((self.source_vocab[i], self.target_vocab[j], self.prob[i, j]))
        rows.sort(key=lambda r: (r[0], r[1]))
        with open(path, "w", encoding="utf-8") as fh:
            for s, t, p in rows:
                fh.write(f"{s}\t{t}\t{p!r}\n")

    @classmethod
    def load(cls, path: str | Path) -> "TranslationTable":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                s, t, p = line.rstrip("\n").split("\t")
                entries.append((s, t, float(p)))
        src = sorted({s for s, _, _ in entries if s != NULL})
        tgt = sorted({t for _, t, _ in entries})
        table = cls.uniform(src, tgt)
        table.prob[:] = 0.0
        for s, t, p in entries:
            table.prob[table.src_index[s], table.tgt_index[t]] = p
        return table


@dataclass(frozen=True)
class PriorCounts:
    """Pseudo-counts added to the expected counts before each M-step."""

    counts: dict[tuple[str, str], float]
    strength: float = 1.0

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("prior strength must be non-negative")
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("prior counts must be non-negative")

    def count(self, source: str, target: str) -> float:
        return self.counts.get((source, target), 0.0)

    def matrix_for(self, table: TranslationTable) -> np.ndarray:
        m = np.zeros_like(table.prob)
        for (s, t), c in self.counts.items():
            i = table.src_index.get(s)
            j = table.tgt_index.get(t)
            if i is not None and j is not None:
                m[i, j] = c
        return self.strength * m


def derive_priors(pool_table: TranslationTable, strength: float) -> PriorCounts:
    if strength < 0:
        raise ValueError("prior strength must be non-negative")
    counts = {}
    nz_i, nz_j = np.nonzero(pool_table.prob)
    for i, j in zip(nz_i, nz_j):
        counts[(pool_table.source_vocab[i], pool_table.target_vocab[j])] = float(
            pool_table.prob[i, j] * strength
        )
    return PriorCounts(counts, 1.0)


class _LinkIndex:
    """Flattened (source id, target id, target token) triples for a corpus."""

    def __init__(self, table: TranslationTable, pairs):
        src_ids, tgt_ids, groups = [], [], []
        g = 0
        for s, t in pairs:
            s_idx = np.array([0] + [table.src_index[w] for w in s])
            t_idx = np.array([table.tgt_index[w] for w in t])
            src_ids.append(np.tile(s_idx, len(t_idx)))
            tgt_ids.append(np.repeat(t_idx, len(s_idx)))
            groups.append(np.repeat(np.arange(g, g + len(t_idx)), len(s_idx)))
            g += len(t_idx)
        self.src = np.concatenate(src_ids)
        self.tgt = np.concatenate(tgt_ids)
        self.group = np.concatenate(groups)
        self.n_groups = g


def _expected_counts(prob: np.ndarray, idx: _LinkIndex) -> np.ndarray:
    n_s, n_t = prob.shape
    w = prob[idx.src, idx.tgt]
    denom = np.bincount(idx.group, weights=w, minlength=idx.n_groups)
    post = w / denom[idx.group]
    flat = np.bincount(idx.src * n_t + idx.tgt, weights=post, minlength=n_s * n_t)
    return flat.reshape(n_s, n_t)


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    out = np.empty_like(counts)
    empty = totals[:, 0] <= 0
    out[~empty] = counts[~empty] / totals[~empty]
    out[empty] = 1.0 / counts.shape[1]
    return out


def em_train(
    pairs,
    iterations: int,
    prior: PriorCounts | None = None,
    *,
    workers: int = 1,
    history: list | None = None,
) -> TranslationTable:
    """Train IBM Model 1 ``prob(source -> target)`` by EM.

    ``pairs`` holds (source, target) sentences, each a whitespace string or a
    word list.  If ``history`` is a list, the table after every iteration is
    appended to it (iteration 0 being the uniform start).
    """
    if iterations < 1:
        raise ValueError("iterations must be positive")
    segmented = _segment_pairs(pairs)
    src_vocab = sorted({w for s, _ in segmented for w in s})
    tgt_vocab = sorted({w for _, t in segmented for w in t})
    table = TranslationTable.uniform(src_vocab, tgt_vocab)
    chunks = [
        _LinkIndex(table, segmented[k:k + EM_CHUNK_PAIRS])
        for k in range(0, len(segmented), EM_CHUNK_PAIRS)
    ]
    prior_matrix = prior.matrix_for(table) if prior is not None else None
    if history is not None:
        history.append(TranslationTable(table.source_vocab, table.target_vocab, table.prob.copy()))

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and len(chunks) > 1 else None
    try:
        for _ in range(iterations):
            prob = table.prob
            if pool is None:
                partials = [_expected_counts(prob, c) for c in chunks]
            else:
                partials = list(pool.map(lambda c: _expected_counts(prob, c), chunks))
            counts = partials[0].copy()
            for p in partials[1:]:
                counts += p
            if prior_matrix is not None:
                counts += prior_matrix
            table = TranslationTable(table.source_vocab, table.target_vocab, _normalize_rows(counts))
            if history is not None:
                history.append(table)
    finally:
        if pool is not None:
            pool.shutdown()
    return table


def corpus_log_likelihood(table: TranslationTable, pairs) -> float:
    """IBM Model 1 log-likelihood with uniform alignment over len(source)+1 slots."""
    total = 0.0
    for s, t in _segment_pairs(pairs):
        m = table.lookup(s, t)
        m = np.where(m > 0, m, 0.0)
        for col, word in enumerate(t):
            if word not in table.tgt_index:
                m[:, col] = LOG_FLOOR
        for row, word in enumerate(s, start=1):
            if word not in table.src_index:
                m[row, :] = LOG_FLOOR
        per_target = np.maximum(m.sum(axis=0), LOG_FLOOR) / (len(s) + 1)
        total += float(np.sum(np.log(per_target)))
    return total


def viterbi_align(table: TranslationTable, pair) -> AlignmentLinkSet:
    src, tgt = _words(pair[0]), _words(pair[1])
    if not src or not tgt:
        raise ValueError("pair has an empty side")
    m = table.lookup(src, tgt)
    links = []
    for j in range(len(tgt)):
        words = m[1:, j]
        i = int(np.argmax(words))
        if words[i] > 0 and not m[0, j] > words[i]:
            links.append((i, j))
    return AlignmentLinkSet(links, len(src), len(tgt))


_NEIGHBORS = ((-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))


def symmetrize_grow_diag(forward: AlignmentLinkSet, reverse: AlignmentLinkSet) -> AlignmentLinkSet:
    """Grow-diag (no final step).

    ``reverse`` must already be in source-major indexing.  Starting from the
    intersection, union links adjacent (8-neighbourhood) to an accepted link
    are added while their row or column is still uncovered; current links are
    visited in (source, target) order and the sweep repeats until nothing
    changes.
    """
    if (forward.src_len, forward.tgt_len) != (reverse.src_len, reverse.tgt_len):
        raise ValueError("forward and reverse alignments have mismatched lengths")
    union = forward.links | reverse.links
    accepted = set(forward.links & reverse.links)
    rows = {i for i, _ in accepted}
    cols = {j for _, j in accepted}
    added = True
    while added:
        added = False
        for i in range(forward.src_len):
            for j in range(forward.tgt_len):
                if (i, j) not in accepted:
                    continue
                for di, dj in _NEIGHBORS:
                    ni, nj = i + di, j + dj
                    cand = (ni, nj)
                    if cand in union and cand not in accepted and (ni not in rows or nj not in cols):
                        accepted.add(cand)
                        rows.add(ni)
                        cols.add(nj)
                        added = True
    return AlignmentLinkSet(accepted, forward.src_len, forward.tgt_len)


def symmetrize(forward: AlignmentLinkSet, reverse: AlignmentLinkSet, method: str = "grow-diag") -> AlignmentLinkSet:
    if method == "grow-diag":
        return symmetrize_grow_diag(forward, reverse)
    if (forward.src_len, forward.tgt_len) != (reverse.src_len, reverse.tgt_len):
        raise ValueError("forward and reverse alignments have mismatched lengths")
    if method == "intersection":
        return AlignmentLinkSet(forward.links & reverse.links, forward.src_len, forward.tgt_len)
    if method == "union":
        return AlignmentLinkSet(forward.links | reverse.links, forward.src_len, forward.tgt_len)
    raise ValueError(f"unknown symmetrization {method!r}; expected one of {SYMMETRIZATIONS}")


def project_to_subwords(
    word_links: AlignmentLinkSet, src_tok: TokenizedSentence, tgt_tok: TokenizedSentence
) -> AlignmentLinkSet:
    """Expand word links to every (source subword, target subword) pair."""
    src_pos: dict[int, list[int]] = {}
    for pos, w in enumerate(src_tok.word_index):
        if w >= 0:
            src_pos.setdefault(w, []).append(pos)
    tgt_pos: dict[int, list[int]] = {}
    for pos, w in enumerate(tgt_tok.word_index):
        if w >= 0:
            tgt_pos.setdefault(w, []).append(pos)
    links = []
    for ws, wt in word_links.links:
        if ws not in src_pos or wt not in tgt_pos:
            raise ValueError(f"word link ({ws},{wt}) out of range for the tokenized pair")
        links.extend((i, j) for i in src_pos[ws] for j in tgt_pos[wt])
    return AlignmentLinkSet(links, len(src_tok), len(tgt_tok))


def identity_word_links(num_words: int) -> AlignmentLinkSet:
    """Word links for a sentence paired with itself."""
    return AlignmentLinkSet(((i, i) for i in range(num_words)), num_words, num_words)


def align_words(
    pairs,
    iterations: int = 5,
    prior_forward: PriorCounts | None = None,
    prior_reverse: PriorCounts | None = None,
    method: str = "grow-diag",
    workers: int = 1,
) -> list[AlignmentLinkSet]:
    """Both directional models, Viterbi links, then symmetrization, per pair."""
    segmented = _segment_pairs(pairs)
    fwd = em_train(segmented, iterations, prior_forward, workers=workers)
    rev = em_train([(t, s) for s, t in segmented], iterations, prior_reverse, workers=workers)
    out = []
    for s, t in segmented:
        f_links = viterbi_align(fwd, (s, t))
        r_links = viterbi_align(rev, (t, s)).transpose()
        out.append(symmetrize(f_links, r_links, method))
    return out


def write_pharaoh(link_sets: Iterable[AlignmentLinkSet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ls in link_sets:
            fh.write(ls.to_pharaoh() + "\n")


def read_pharaoh(path: str | Path, lengths: Sequence[tuple[int, int]]) -> list[AlignmentLinkSet]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    return [AlignmentLinkSet.from_pharaoh(line, s, t) for line, (s, t) in zip(lines, lengths)]


def link_precision_recall(predicted: AlignmentLinkSet, gold: AlignmentLinkSet) -> tuple[int, int, int]:
    """(true positives, predicted count, gold count) for corpus-level pooling."""
    return len(predicted.links & gold.links), len(predicted.links), len(gold.links)
