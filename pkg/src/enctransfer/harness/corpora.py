"""Synthetic corpora for the data conditions and their conversion into transfer items."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..alignment import (
    AlignmentLinkSet,
    PriorCounts,
    align_words,
    derive_priors,
    em_train,
    identity_word_links,
    project_to_subwords,
)
from ..data_filter import (
    DEFAULT_TOKEN_CAP,
    CaptionClassifier,
    EmbedFn,
    ScoredPair,
    filter_by_similarity,
    select_caption_like,
    train_caption_classifier,
)
from ..tokenizer import Vocabulary, encode
from ..transfer import TransferItem
from .synthetic import (
    PERMUTATIONS,
    CipherPair,
    CipherSpec,
    EnglishGenerator,
    check_disjoint,
    encipher,
    english_vocabulary,
    has_color,
    make_cipher_spec,
    make_pool,
)

CONDITIONS = ("english_only", "task_mt", "caption_mt", "generic", "caption_like")
CONDITION_LABELS = {
    "english_only": "English only",
    "task_mt": "Task MT",
    "caption_mt": "Caption MT",
    "generic": "Generic",
    "caption_like": "Caption-like",
}

# Sub-stream ids for seeding; each stream depends only on (seed, stream id),
# so adding languages never changes the English material.
_STREAM_HELD = 1
_STREAM_TASK = 2
_STREAM_CAPTION = 3
_STREAM_ENGLISH = 4
_STREAM_PROBE = 5
_STREAM_CLASSIFIER = 6
_STREAM_GENERIC = 7


class ShortfallError(ValueError):
    """A condition asked for more pairs than its source can supply."""


@dataclass
class SyntheticSuite:
    """Everything a run draws from: cipher languages, English corpora, pools
    and held-out evaluation material."""

    specs: list[CipherSpec]
    task: list[str]
    caption: list[str]
    generic: list[str]
    english_stream: list[str]
    pools: dict[str, list[CipherPair]]
    held_out: list[str]
    probe_train: list[str]
    probe_test: list[str]
    seed: int

    @property
    def languages(self) -> list[str]:
        return [s.lang for s in self.specs]

    def spec(self, lang: str) -> CipherSpec:
        for s in self.specs:
            if s.lang == lang:
                return s
        raise KeyError(lang)


def make_specs(num_languages: int, seed: int) -> list[CipherSpec]:
    """Language ``i`` depends only on (seed, i); permutation rules cycle."""
    vocab = english_vocabulary()
    specs = [make_cipher_spec(i, vocab, PERMUTATIONS[i % len(PERMUTATIONS)], seed=seed * 1000 + i)
             for i in range(num_languages)]
    check_disjoint(specs, vocab)
    return specs


def build_suite(num_languages: int, pairs_per_language: int = 5000, english_stream_size: int = 20000,
                pool_size: int = 20000, held_out_size: int = 100, probe_train_size: int = 2000,
                probe_test_size: int = 500, caption_fraction: float = 0.3, pool_noise: float = 0.1,
                seed: int = 0) -> SyntheticSuite:
    held = EnglishGenerator([seed, _STREAM_HELD]).sample("task", held_out_size, unique=True)
    exclude = set(held)
    task = EnglishGenerator([seed, _STREAM_TASK]).sample("task", pairs_per_language, exclude=exclude)
    caption = EnglishGenerator([seed, _STREAM_CAPTION]).sample("caption", pairs_per_language)
    generic = EnglishGenerator([seed, _STREAM_GENERIC]).sample("generic", pairs_per_language)
    stream = EnglishGenerator([seed, _STREAM_ENGLISH]).sample("task", english_stream_size, exclude=exclude)
    probe_gen = EnglishGenerator([seed, _STREAM_PROBE])
    probe_train = probe_gen.sample("task", probe_train_size)
    probe_test = probe_gen.sample("task", probe_test_size, unique=True)
    specs = make_specs(num_languages, seed)
    pools = {
        s.lang: make_pool(s, pool_size, caption_fraction, pool_noise, seed=seed * 1000 + 500 + s.index)
        for s in specs
    }
    return SyntheticSuite(specs, task, caption, generic, stream, pools, held, probe_train, probe_test, seed)


def train_suite_classifier(seed: int, size: int = 2000, steps: int = 300) -> CaptionClassifier:
    """Caption (positive) versus generic prose (negative) on a fresh sample."""
    gen = EnglishGenerator([seed, _STREAM_CLASSIFIER])
    pos = gen.sample("caption", size)
    neg = gen.sample("generic", size)
    return train_caption_classifier(pos, neg, steps=steps, seed=seed)


@dataclass
class ConditionCorpus:
    condition: str
    english: list[str]
    bilingual: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    scored: dict[str, list[ScoredPair]] = field(default_factory=dict)

    @property
    def num_bilingual(self) -> int:
        return sum(len(v) for v in self.bilingual.values())


def _need(available: int, k: int, what: str) -> None:
    if available < k:
        raise ShortfallError(f"{what}: {available} available, {k} requested (short by {k - available})")


def _as_pair(p) -> tuple[str, str]:
    return (p.source, p.target) if hasattr(p, "source") else (p[0], p[1])


def build_condition_corpus(condition: str, specs: Sequence[CipherSpec], k: int,
                           english_task_corpus: Sequence[str], english_caption_corpus: Sequence[str],
                           generic_pool: Mapping[str, Sequence], english_stream: Sequence[str] = (),
                           classifier: CaptionClassifier | None = None, embed: EmbedFn | None = None,
                           oversample: float = 2.0, token_cap: int = DEFAULT_TOKEN_CAP,
                           seed: int = 0) -> ConditionCorpus:
    """Bilingual pairs for one data condition, ``k`` per language, plus the English stream.

    ``generic_pool`` maps a language id to its pool of (source, target)
    pairs.  ``caption_like`` first keeps the ``oversample * k`` most
    caption-like pool pairs, then the ``k`` with the best greedy-match F1.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; choose from {CONDITIONS}")
    out = ConditionCorpus(condition, list(english_stream))
    if condition == "english_only":
        return out
    if not specs:
        raise ValueError(f"condition {condition} needs at least one language")
    if k < 1:
        raise ValueError("k must be positive")
    for spec in specs:
        lang = spec.lang
        if condition in ("task_mt", "caption_mt"):
            src = english_task_corpus if condition == "task_mt" else english_caption_corpus
            _need(len(src), k, f"{condition} English corpus")
            out.bilingual[lang] = [(s, encipher(s, spec)[0]) for s in src[:k]]
            continue
        pool = generic_pool.get(lang, ())
        _need(len(pool), k, f"pool for {lang}")
        if condition == "generic":
            rng = np.random.default_rng([seed, spec.index, 17])
            pick = np.sort(rng.choice(len(pool), size=k, replace=False))
            out.bilingual[lang] = [_as_pair(pool[i]) for i in pick]
            continue
        if classifier is None or embed is None:
            raise ValueError("caption_like needs a caption classifier and an embedding function")
        candidates = [(*_as_pair(p), lang) for p in pool]
        shortlist = select_caption_like(candidates, classifier, int(np.ceil(oversample * k)), token_cap)
        _need(len(shortlist), k, f"caption-like shortlist for {lang}")
        chosen = filter_by_similarity(shortlist, embed, k)
        out.scored[lang] = chosen
        out.bilingual[lang] = [(p.source, p.target) for p in chosen]
    return out


def pool_priors(pool: Sequence, iterations: int, strength: float,
                workers: int = 1) -> tuple[PriorCounts, PriorCounts]:
    """Forward and reverse prior counts from EM over a whole pool."""
    pairs = [_as_pair(p) for p in pool]
    if not pairs:
        raise ValueError("empty pool")
    fwd = em_train(pairs, iterations, workers=workers)
    rev = em_train([(t, s) for s, t in pairs], iterations, workers=workers)
    return derive_priors(fwd, strength), derive_priors(rev, strength)


def english_items(sentences: Sequence[str], teacher_vocab: Vocabulary,
                  student_vocab: Vocabulary) -> list[TransferItem]:
    """Identity pairs: each English word is linked to itself across the two tokenizers."""
    items = []
    for s in sentences:
        t = encode(teacher_vocab, s)
        u = encode(student_vocab, s)
        items.append(TransferItem(t, u, project_to_subwords(identity_word_links(t.num_words), t, u), "en"))
    return items


def bilingual_items(pairs: Sequence[tuple[str, str]], word_links: Sequence[AlignmentLinkSet], lang: str,
                    teacher_vocab: Vocabulary, student_vocab: Vocabulary) -> list[TransferItem]:
    items = []
    for (src, tgt), links in zip(pairs, word_links):
        t = encode(teacher_vocab, src)
        u = encode(student_vocab, tgt)
        items.append(TransferItem(t, u, project_to_subwords(links, t, u), lang))
    return items


def align_condition(corpus: ConditionCorpus, priors: Mapping[str, tuple[PriorCounts, PriorCounts]],
                    iterations: int = 5, workers: int = 1) -> dict[str, list[AlignmentLinkSet]]:
    """Word links per language, each aligned with its own pool priors."""
    out = {}
    for lang, pairs in corpus.bilingual.items():
        fwd, rev = priors.get(lang, (None, None))
        out[lang] = align_words(pairs, iterations, fwd, rev, workers=workers)
    return out


def gold_items(sentences: Sequence[str], spec: CipherSpec, teacher_vocab: Vocabulary,
               student_vocab: Vocabulary) -> list[TransferItem]:
    """Held-out items for one language with links taken from the known cipher permutation."""
    items = []
    for s in sentences:
        tgt, gold = encipher(s, spec)
        t = encode(teacher_vocab, s)
        u = encode(student_vocab, tgt)
        items.append(TransferItem(t, u, project_to_subwords(gold, t, u), spec.lang))
    return items


def probe_labels(sentences: Sequence[str]) -> np.ndarray:
    return np.array([has_color(s) for s in sentences], dtype=bool)
