"""Desk-scale evaluation proxies: retrieval, a frozen linear probe, teacher-state MSE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from ..encoder import Encoder, pad_batch
from ..transfer import ProjectionHead, TransferConfig, TransferItem, batch_loss_and_grads, project_states

EVAL_BATCH = 256


def _pool(states: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return (states * mask[..., None]).sum(axis=1) / mask.sum(axis=1)[:, None]


def teacher_pooled(teacher: Encoder, sequences: Sequence[Sequence[int]], layer: int = -1) -> np.ndarray:
    """Mean-pooled teacher states (special tokens included), one row per sentence."""
    out = []
    for start in range(0, len(sequences), EVAL_BATCH):
        ids, mask = pad_batch(sequences[start:start + EVAL_BATCH])
        states, _ = teacher.forward_batch(ids, mask, keep_cache=False)
        out.append(_pool(states[layer], mask))
    return np.concatenate(out) if out else np.zeros((0, teacher.config.hidden_dim))


def student_pooled(student: Encoder, heads: Sequence[ProjectionHead], sequences: Sequence[Sequence[int]],
                   head_index: int = -1) -> np.ndarray:
    """Mean-pooled projected student states for one head (the deepest by default)."""
    out = []
    for start in range(0, len(sequences), EVAL_BATCH):
        reps, mask = project_states(student, heads, sequences[start:start + EVAL_BATCH])
        out.append(_pool(reps[head_index], mask))
    return np.concatenate(out) if out else np.zeros((0, student.config.hidden_dim))


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def eval_retrieval(student: Encoder, heads: Sequence[ProjectionHead], teacher: Encoder,
                   held_out_pairs: Sequence[tuple[Sequence[int], Sequence[int]]], n: int = 100) -> float:
    """Top-1 accuracy of retrieving the English partner among ``n`` candidates.

    ``held_out_pairs`` holds (teacher ids, student ids); the first ``n`` are
    used.  Queries are pooled final projected student states, candidates
    pooled teacher states at the matched layer, compared by cosine.
    """
    if n < 1 or n > len(held_out_pairs):
        raise ValueError(f"need 1 <= N <= {len(held_out_pairs)} held-out pairs, got N={n}")
    pairs = held_out_pairs[:n]
    cand = _unit(teacher_pooled(teacher, [p[0] for p in pairs], heads[-1].target_layer))
    query = _unit(student_pooled(student, heads, [p[1] for p in pairs]))
    hits = np.argmax(query @ cand.T, axis=1) == np.arange(n)
    return float(hits.mean())


@dataclass
class LinearProbe:
    """Logistic-regression probe over mean-pooled states at one teacher layer."""

    model: LogisticRegression
    layer: int

    def predict(self, features: np.ndarray) -> np.ndarray:
        try:
            check_is_fitted(self.model)
        except NotFittedError as exc:
            raise ValueError("untrained probe") from exc
        return self.model.predict(features).astype(bool)

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(features) == np.asarray(labels, dtype=bool)))


def train_probe(teacher: Encoder, sequences: Sequence[Sequence[int]], labels: np.ndarray, layer: int = -1,
                c: float = 1.0) -> LinearProbe:
    if layer < 0:
        layer += teacher.config.num_layers + 1
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("probe needs both classes")
    model = LogisticRegression(C=c, max_iter=2000)
    model.fit(teacher_pooled(teacher, sequences, layer), labels)
    return LinearProbe(model, layer)


def eval_proxy_task(teacher: Encoder, student: Encoder, heads: Sequence[ProjectionHead],
                    labeled_sentences: Mapping[str, tuple[Sequence[Sequence[int]], np.ndarray]],
                    probe: LinearProbe | None) -> dict[str, float]:
    """Frozen-probe accuracy per language on the student's projected states.

    The head matched to the probe's teacher layer feeds the probe, which is
    what a downstream consumer would read after the encoder swap.  The
    teacher is only used to check that the probe belongs to it.
    """
    if probe is None:
        raise ValueError("untrained probe")
    if not 0 <= probe.layer <= teacher.config.num_layers:
        raise ValueError("probe layer outside the teacher")
    index = [h.target_layer for h in heads].index(probe.layer) if any(
        h.target_layer == probe.layer for h in heads) else len(heads) - 1
    return {
        lang: probe.accuracy(student_pooled(student, heads, seqs, index), labels)
        for lang, (seqs, labels) in labeled_sentences.items()
    }


def eval_teacher_mse(student: Encoder, heads: Sequence[ProjectionHead], teacher: Encoder,
                     items: Sequence[TransferItem], config: TransferConfig) -> list[float]:
    """Per matched layer, the mean over items of the enabled loss components."""
    if not items:
        raise ValueError("no held-out items")
    sums = np.zeros(len(heads))
    for start in range(0, len(items), EVAL_BATCH):
        a, m, *_ = batch_loss_and_grads(teacher, student, heads, items[start:start + EVAL_BATCH], config,
                                        need_grads=False)
        sums += np.asarray(a) + np.asarray(m)
    return [float(v) for v in sums / len(items)]
