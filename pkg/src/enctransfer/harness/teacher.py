"""A frozen teacher that carries a task feature.

A randomly initialised encoder does not linearly expose the proxy property
(a colour word is present) in its pooled states.  ``mark_token_class`` gives
the teacher one residual-stream direction reserved for that property: the
direction is removed from every embedding and from every write into the
residual stream, then added back, scaled by ``strength``, to the embeddings
of the marked tokens.  The marked tokens thus shift the pooled state along a
channel that no layer disturbs.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from ..encoder import Encoder, EncoderConfig, init_params
from ..tokenizer import Vocabulary, encode

RESIDUAL_WRITES = ("wo", "w2")
RESIDUAL_BIASES = ("bo", "b2")


def feature_direction(dim: int, seed: int) -> np.ndarray:
    u = np.random.default_rng([seed, 31337]).normal(size=dim)
    return u / np.linalg.norm(u)


def mark_token_class(encoder: Encoder, token_ids: Iterable[int], strength: float, seed: int = 0) -> np.ndarray:
    """Reserve a direction for ``token_ids`` in place; returns the direction."""
    p = encoder.params
    u = feature_direction(encoder.config.hidden_dim, seed)
    for name in ("tok_emb", "pos_emb"):
        p[name] -= np.outer(p[name] @ u, u)
    for name, value in p.items():
        suffix = name.rsplit(".", 1)[-1]
        if suffix in RESIDUAL_WRITES:
            value -= np.outer(value @ u, u)
        elif suffix in RESIDUAL_BIASES:
            value -= (value @ u) * u
    for t in sorted(set(token_ids)):
        p["tok_emb"][t] += strength * u
    return u


def marked_token_ids(vocab: Vocabulary, words: Iterable[str]) -> list[int]:
    """Every subword id the teacher tokenizer uses for ``words``."""
    ids = set()
    for w in words:
        tok = encode(vocab, w)
        ids.update(i for i, wi in zip(tok.token_ids, tok.word_index) if wi >= 0)
    return sorted(ids)


def build_teacher(config: EncoderConfig, vocab: Vocabulary, marked_words: Iterable[str],
                  strength: float) -> Encoder:
    teacher = Encoder(config, init_params(config))
    if strength:
        mark_token_class(teacher, marked_token_ids(vocab, marked_words), strength, config.seed)
    return teacher
