"""Hidden-state transfer from a frozen teacher into a trainable student.

Per matched teacher layer ``k`` the student representation is a projection of
either a softmax-weighted mixture of all student states or the student state
at depth ``k``.  The objective averages, over matched layers, a link-wise
alignment MSE and an MSE between mean-pooled states.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import AlignmentLinkSet
from .encoder import (
    Encoder,
    HiddenStack,
    Params,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
    pad_batch,
    trainable_names,
)
from .tokenizer import TokenizedSentence

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("align_plus_mean", "align_only")
INPUT_VARIANTS = ("weighted_layers", "last_layer")
PROJECTION_VARIANTS = ("bottleneck", "linear", "identity")
ALIGN_REDUCTIONS = ("mean", "sum")
BOTTLENECK_FACTOR = 4


class NoLinksError(ValueError):
    """Raised by align_loss for an empty link set; callers skip the term."""


@dataclass
class TransferConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    warmup_ratio: float = 0.10
    weight_decay: float = 1e-2
    momentum: float = 0.9
    trainable_layers: int = 6
    target_layers: tuple[int, ...] | None = None
    loss_variant: str = "align_plus_mean"
    input_variant: str = "weighted_layers"
    projection_variant: str = "bottleneck"
    align_reduction: str = "mean"
    grad_clip: float | None = None
    chunk_size: int | None = None
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.target_layers is not None:
            self.target_layers = tuple(int(k) for k in self.target_layers)
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.workers < 1:
            raise ValueError("batch_size, epochs and workers must be positive")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")
        for value, allowed in (
            (self.loss_variant, LOSS_VARIANTS),
            (self.input_variant, INPUT_VARIANTS),
            (self.projection_variant, PROJECTION_VARIANTS),
            (self.align_reduction, ALIGN_REDUCTIONS),
        ):
            if value not in allowed:
                raise ValueError(f"{value!r} is not one of {allowed}")
        if self.target_layers is not None and not self.target_layers:
            raise ValueError("target_layers must be non-empty")

    def resolve_target_layers(self, num_layers: int) -> tuple[int, ...]:
        if self.target_layers is None:
            k = min(max(self.trainable_layers, 1), num_layers)
            return tuple(range(num_layers - k + 1, num_layers + 1))
        for k in self.target_layers:
            if not 0 <= k <= num_layers:
                raise ValueError(f"target layer {k} outside [0, {num_layers}]")
        return self.target_layers


# ------------------------------------------------------------------ heads


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class ProjectionHead:
    """Maps student states to the representation matched against one teacher layer."""

    target_layer: int
    num_states: int
    hidden_dim: int
    projection: str = "bottleneck"
    input_variant: str = "weighted_layers"
    params: Params = field(default_factory=dict)

    @classmethod
    def create(cls, target_layer: int, num_states: int, hidden_dim: int, projection: str,
               input_variant: str, rng: np.random.Generator) -> "ProjectionHead":
        d = hidden_dim
        p: Params = {}
        if input_variant == "weighted_layers":
            p["logits"] = np.zeros(num_states)
        if projection == "bottleneck":
            r = max(d // BOTTLENECK_FACTOR, 1)
            p["down.w"] = rng.uniform(-1, 1, size=(d, r)) * np.sqrt(3.0 / d)
            p["down.b"] = np.zeros(r)
            p["ln.g"] = np.ones(r)
            p["ln.b"] = np.zeros(r)
            p["up.w"] = rng.uniform(-1, 1, size=(r, d)) * np.sqrt(3.0 / r) * 0.1
            p["up.b"] = np.zeros(d)
        elif projection == "linear":
            p["w"] = np.eye(d) + rng.uniform(-1, 1, size=(d, d)) * np.sqrt(3.0 / d) * 0.1
            p["b"] = np.zeros(d)
        elif projection != "identity":
            raise ValueError(f"unknown projection {projection!r}")
        return cls(target_layer, num_states, hidden_dim, projection, input_variant, p)

    @property
    def num_parameters(self) -> int:
        return sum(v.size for k, v in self.params.items() if k != "logits")

    def mixture_weights(self) -> np.ndarray:
        if self.input_variant != "weighted_layers":
            w = np.zeros(self.num_states)
            w[self.target_layer] = 1.0
            return w
        return softmax(self.params["logits"])

    def forward(self, states: np.ndarray):
        """states: (L+1, ..., d) -> projected (..., d) and a backward cache."""
        if states.shape[0] != self.num_states or states.shape[-1] != self.hidden_dim:
            raise ValueError("student stack does not match this projection head")
        if self.input_variant == "weighted_layers":
            a = softmax(self.params["logits"])
            x = np.tensordot(a, states, axes=1)
        else:
            a = None
            x = states[self.target_layer]
        p = self.params
        if self.projection == "identity":
            return x.copy(), (states, a, x, None)
        if self.projection == "linear":
            return x @ p["w"] + p["b"], (states, a, x, None)
        u = x @ p["down.w"] + p["down.b"]
        act = gelu(u)
        n, ln = layer_norm(act, p["ln.g"], p["ln.b"])
        y = x + n @ p["up.w"] + p["up.b"]
        return y, (states, a, x, (u, n, ln))

    def backward(self, dy: np.ndarray, cache):
        """Returns (gradient w.r.t. the student states, head parameter grads)."""
        states, a, x, inner = cache
        p = self.params
        grads: Params = {}
        lead = tuple(range(dy.ndim - 1))
        if self.projection == "identity":
            dx = dy
        elif self.projection == "linear":
            grads["w"] = x.reshape(-1, self.hidden_dim).T @ dy.reshape(-1, self.hidden_dim)
            grads["b"] = dy.sum(axis=lead)
            dx = dy @ p["w"].T
        else:
            u, n, ln = inner
            r = u.shape[-1]
            grads["up.w"] = n.reshape(-1, r).T @ dy.reshape(-1, self.hidden_dim)
            grads["up.b"] = dy.sum(axis=lead)
            dact, grads["ln.g"], grads["ln.b"] = layer_norm_backward(dy @ p["up.w"].T, ln, p["ln.g"])
            du = dact * gelu_grad(u)
            grads["down.w"] = x.reshape(-1, self.hidden_dim).T @ du.reshape(-1, r)
            grads["down.b"] = du.sum(axis=lead)
            dx = dy + du @ p["down.w"].T
        dstates = np.zeros_like(states)
        if a is None:
            dstates[self.target_layer] = dx
        else:
            dstates += a.reshape((-1,) + (1,) * dx.ndim) * dx
            da = np.tensordot(states, dx, axes=(tuple(range(1, states.ndim)), tuple(range(dx.ndim))))
            grads["logits"] = a * (da - np.dot(a, da))
        return dstates, grads


def create_heads(config: TransferConfig, student: Encoder, teacher_layers: int | None = None) -> list[ProjectionHead]:
    """One head per matched teacher layer, seeded from ``config.seed``."""
    n_layers = student.config.num_layers if teacher_layers is None else teacher_layers
    rng = np.random.default_rng(config.seed + 7919)
    return [
        ProjectionHead.create(k, student.config.num_layers + 1, student.config.hidden_dim,
                              config.projection_variant, config.input_variant, rng)
        for k in config.resolve_target_layers(n_layers)
    ]


def layer_mix(student_stack: HiddenStack, head: ProjectionHead, k: int | None = None) -> np.ndarray:
    """Projected student representation (T, d) for the head's teacher layer."""
    if k is not None and k != head.target_layer:
        raise ValueError(f"head targets layer {head.target_layer}, not {k}")
    states = np.stack(student_stack.states)
    y, _ = head.forward(states)
    return y


# ----------------------------------------------------------------- losses


def _sq(diff: np.ndarray, reduction: str) -> np.ndarray:
    return (diff * diff).mean(axis=-1) if reduction == "mean" else (diff * diff).sum(axis=-1)


def align_loss(teacher_states: np.ndarray, projected_student: np.ndarray, links, reduction: str = "mean") -> float:
    """Average over links (i, j) of the squared distance between teacher
    position i and student position j.  ``links`` may be any iterable of
    index pairs (duplicates are averaged like any other link)."""
    pairs = list(links)
    if not pairs:
        raise NoLinksError("no links")
    i = np.array([p[0] for p in pairs])
    j = np.array([p[1] for p in pairs])
    if i.max() >= len(teacher_states) or j.max() >= len(projected_student):
        raise ValueError("link index out of range")
    return float(_sq(teacher_states[i] - projected_student[j], reduction).mean())


def mean_loss(teacher_states: np.ndarray, projected_student: np.ndarray) -> float:
    if len(teacher_states) == 0 or len(projected_student) == 0:
        raise ValueError("empty state matrix")
    diff = teacher_states.mean(axis=0) - projected_student.mean(axis=0)
    return float((diff * diff).mean())


@dataclass
class LossBreakdown:
    align: list[float]
    mean: list[float]
    total: float

    def to_dict(self) -> dict:
        return {"align": self.align, "mean": self.mean, "total": self.total}


def total_loss(teacher_stack: HiddenStack, student_stack: HiddenStack, heads: Sequence[ProjectionHead],
               links: AlignmentLinkSet, config: TransferConfig) -> LossBreakdown:
    """Objective for one item, summed per matched layer then averaged over layers."""
    align, mean = [], []
    for head in heads:
        k = head.target_layer
        g = layer_mix(student_stack, head)
        h = teacher_stack[k]
        align.append(align_loss(h, g, links.links, config.align_reduction) if len(links) else 0.0)
        mean.append(mean_loss(h, g) if config.loss_variant == "align_plus_mean" else 0.0)
    total = float(np.mean([a + m for a, m in zip(align, mean)]))
    return LossBreakdown(align, mean, total)


# ---------------------------------------------------------- batched path


@dataclass(frozen=True)
class TransferItem:
    teacher: TokenizedSentence
    student: TokenizedSentence
    links: AlignmentLinkSet
    stream: str = "en"

    def __post_init__(self):
        if self.links.src_len != len(self.teacher) or self.links.tgt_len != len(self.student):
            raise ValueError("link set does not match the tokenized pair")


TransferBatch = list[TransferItem]


@dataclass
class _BatchArrays:
    t_ids: np.ndarray
    t_mask: np.ndarray
    s_ids: np.ndarray
    s_mask: np.ndarray
    link_b: np.ndarray
    link_i: np.ndarray
    link_j: np.ndarray
    n_links: np.ndarray

    @classmethod
    def build(cls, items: Sequence[TransferItem], t_pad: int = 0, s_pad: int = 0) -> "_BatchArrays":
        t_ids, t_mask = pad_batch([it.teacher.token_ids for it in items], t_pad)
        s_ids, s_mask = pad_batch([it.student.token_ids for it in items], s_pad)
        lb, li, lj, counts = [], [], [], []
        for b, it in enumerate(items):
            srt = sorted(it.links.links)
            counts.append(len(srt))
            lb += [b] * len(srt)
            li += [p[0] for p in srt]
            lj += [p[1] for p in srt]
        return cls(t_ids, t_mask, s_ids, s_mask, np.array(lb, dtype=np.int64),
                   np.array(li, dtype=np.int64), np.array(lj, dtype=np.int64), np.array(counts))


def _batch_losses(teacher_states: np.ndarray, projected: np.ndarray, arr: _BatchArrays,
                  config: TransferConfig, weight: float):
    """Per-item align / mean losses for one matched layer plus d(weighted sum)/d(projected)."""
    B, _, d = projected.shape
    dproj = np.zeros_like(projected)
    align = np.zeros(B)
    if arr.link_b.size:
        diff = teacher_states[arr.link_b, arr.link_i] - projected[arr.link_b, arr.link_j]
        per_link = _sq(diff, config.align_reduction)
        n = np.maximum(arr.n_links, 1)
        align = np.bincount(arr.link_b, weights=per_link, minlength=B) / n
        scale = 2.0 / d if config.align_reduction == "mean" else 2.0
        np.add.at(dproj, (arr.link_b, arr.link_j), -scale * diff * (weight / n[arr.link_b])[:, None])
    mean = np.zeros(B)
    if config.loss_variant == "align_plus_mean":
        t_len = arr.t_mask.sum(axis=1)
        s_len = arr.s_mask.sum(axis=1)
        t_pool = (teacher_states * arr.t_mask[..., None]).sum(axis=1) / t_len[:, None]
        s_pool = (projected * arr.s_mask[..., None]).sum(axis=1) / s_len[:, None]
        diff = t_pool - s_pool
        mean = (diff * diff).mean(axis=1)
        dpool = -2.0 / d * diff * weight
        dproj += (dpool / s_len[:, None])[:, None, :] * arr.s_mask[..., None]
    return align, mean, dproj


def batch_loss_and_grads(teacher: Encoder, student: Encoder, heads: Sequence[ProjectionHead],
                         items: Sequence[TransferItem], config: TransferConfig, normalizer: int | None = None,
                         need_grads: bool = True):
    """Loss sums over ``items`` and gradients of (sum of item totals) / normalizer.

    Returns (align sums per layer, mean sums per layer, total sum, student
    grads, head grads).
    """
    arr = _BatchArrays.build(items)
    normalizer = normalizer or len(items)
    t_states, _ = teacher.forward_batch(arr.t_ids, arr.t_mask, keep_cache=False)
    s_states, s_cache = student.forward_batch(arr.s_ids, arr.s_mask, keep_cache=need_grads)
    n_heads = len(heads)
    weight = 1.0 / (normalizer * n_heads)
    align_sums, mean_sums = [], []
    total = 0.0
    dstates = np.zeros_like(s_states) if need_grads else None
    head_grads = []
    for head in heads:
        y, cache = head.forward(s_states)
        a, m, dy = _batch_losses(t_states[head.target_layer], y, arr, config, weight)
        align_sums.append(float(a.sum()))
        mean_sums.append(float(m.sum()))
        total += float((a + m).sum()) / n_heads
        if need_grads:
            ds, hg = head.backward(dy, cache)
            dstates += ds
            head_grads.append(hg)
    student_grads = None
    if need_grads:
        student_grads = student.backward_batch(s_cache, {k: dstates[k] for k in range(len(dstates))})
    return align_sums, mean_sums, total, student_grads, head_grads


# ---------------------------------------------------------------- training


def lr_at(step: int, total_steps: int, config: TransferConfig) -> float:
    """Linear warmup from 0 to the peak, then linear decay to 0 at ``total_steps``."""
    warmup = int(math.ceil(config.warmup_ratio * total_steps))
    if step < warmup:
        return config.learning_rate * step / warmup
    if total_steps <= warmup:
        return config.learning_rate
    return config.learning_rate * max(0.0, (total_steps - step) / (total_steps - warmup))


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    align: list[float]
    mean: list[float]
    total: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TransferResult:
    student: Encoder
    heads: list[ProjectionHead]
    log: list[EpochRecord]


def _add_into(acc: dict, grads: dict) -> None:
    for k, g in grads.items():
        if k in acc:
            acc[k] += g
        else:
            acc[k] = g.copy()


def train_transfer(teacher: Encoder, student: Encoder, heads: list[ProjectionHead],
                   data: Sequence[TransferItem], config: TransferConfig,
                   log_path: str | Path | None = None) -> TransferResult:
    """Mini-batch SGD with momentum and decoupled weight decay.

    Only the student's top ``trainable_layers`` blocks and the heads move; the
    teacher is read-only.  Items are reshuffled every epoch from the run seed,
    which interleaves English identity and bilingual items uniformly.
    Weight decay applies to matrices and embedding tables, not to biases,
    layer-norm parameters or mixture logits.
    """
    if not data:
        raise ValueError("empty training data")
    rng = np.random.default_rng(config.seed)
    trainable = sorted(trainable_names(student.config, config.trainable_layers))
    velocity = {name: np.zeros_like(student.params[name]) for name in trainable}
    head_velocity = [{k: np.zeros_like(v) for k, v in h.params.items()} for h in heads]
    chunk = config.chunk_size or config.batch_size
    steps_per_epoch = int(math.ceil(len(data) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    records: list[EpochRecord] = []
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(data))
            n_layers = len(heads)
            ep_align = np.zeros(n_layers)
            ep_mean = np.zeros(n_layers)
            ep_total = 0.0
            lr = 0.0
            for b in range(steps_per_epoch):
                batch = [data[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
                pieces = [batch[c:c + chunk] for c in range(0, len(batch), chunk)]

                def run(piece, n=len(batch)):
                    return batch_loss_and_grads(teacher, student, heads, piece, config, normalizer=n)

                results = list(pool.map(run, pieces)) if pool else [run(p) for p in pieces]
                s_grads: Params = {}
                h_grads: list[Params] = [{} for _ in heads]
                batch_total = 0.0
                for a_sums, m_sums, tot, sg, hg in results:
                    ep_align += a_sums
                    ep_mean += m_sums
                    batch_total += tot
                    _add_into(s_grads, sg)
                    for acc, g in zip(h_grads, hg):
                        _add_into(acc, g)
                if not np.isfinite(batch_total):
                    raise FloatingPointError(f"non-finite loss in batch {b} of epoch {epoch}")
                ep_total += batch_total

                lr = lr_at(step, total_steps, config)
                scale = 1.0
                if config.grad_clip is not None:
                    norm = math.sqrt(sum(float((s_grads[n] ** 2).sum()) for n in trainable)
                                     + sum(float((g ** 2).sum()) for hg in h_grads for g in hg.values()))
                    if norm > config.grad_clip:
                        scale = config.grad_clip / norm
                for name in trainable:
                    _sgd_update(student.params[name], velocity[name], s_grads[name] * scale, lr, config)
                for head, vel, grads in zip(heads, head_velocity, h_grads):
                    for name, g in grads.items():
                        decay = config.weight_decay if name.endswith("w") else 0.0
                        _sgd_update(head.params[name], vel[name], g * scale, lr, config, decay)
                step += 1
            n = len(data)
            rec = EpochRecord(epoch, step, lr, list(ep_align / n), list(ep_mean / n), ep_total / n)
            records.append(rec)
            log.info("epoch %d total %.6f", epoch, rec.total)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
    finally:
        if pool is not None:
            pool.shutdown()
        if log_fh:
            log_fh.close()
    return TransferResult(student, heads, records)


def _sgd_update(param: np.ndarray, vel: np.ndarray, grad: np.ndarray, lr: float,
                config: TransferConfig, decay: float | None = None) -> None:
    if decay is None:
        decay = config.weight_decay if param.ndim >= 2 else 0.0
    vel *= config.momentum
    vel += grad
    param -= lr * vel
    if decay:
        param -= lr * decay * param


# ------------------------------------------------------------ inference


def project_states(student: Encoder, heads: Sequence[ProjectionHead], sequences: Sequence[Sequence[int]],
                   pad_id: int = 0) -> tuple[list[np.ndarray], np.ndarray]:
    """Batched projected representations: one (B, T, d) array per head, plus the mask."""
    ids, mask = pad_batch(sequences, pad_id)
    states, _ = student.forward_batch(ids, mask, keep_cache=False)
    return [h.forward(states)[0] for h in heads], mask


def swap_and_encode(student: Encoder, heads: Sequence[ProjectionHead], sentence: TokenizedSentence) -> list[np.ndarray]:
    """What a downstream consumer sees once the student replaces the teacher:
    one (T, d) matrix per matched teacher layer."""
    reps, _ = project_states(student, heads, [sentence.token_ids])
    return [r[0] for r in reps]


def heads_to_sections(heads: Sequence[ProjectionHead]) -> dict[str, Params]:
    return {
        f"head.{h.target_layer}.{h.input_variant}.{h.projection}": dict(h.params) for h in heads
    }


def heads_from_sections(sections: dict[str, Params], num_states: int, hidden_dim: int) -> list[ProjectionHead]:
    heads = []
    for key, params in sections.items():
        if not key.startswith("head."):
            continue
        _, layer, input_variant, projection = key.split(".")
        heads.append(ProjectionHead(int(layer), num_states, hidden_dim, projection, input_variant, dict(params)))
    heads.sort(key=lambda h: h.target_layer)
    return heads
