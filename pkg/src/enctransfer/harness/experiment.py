"""End-to-end experiment runner: corpora, alignment, filtering, transfer, evaluation, persistence."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..alignment import write_pharaoh
from ..data_filter import write_scored_pairs
from ..encoder import Encoder, EncoderConfig, init_params, save_checkpoint
from ..tokenizer import Vocabulary, encode, save_vocab, train_bpe
from ..transfer import TransferConfig, create_heads, heads_to_sections, train_transfer
from . import corpora
from .config import parse_config, write_config
from .corpora import CONDITION_LABELS, CONDITIONS, SyntheticSuite
from .evaluate import eval_proxy_task, eval_retrieval, eval_teacher_mse, teacher_pooled, train_probe
from .synthetic import COLORS, CipherEmbedder, encipher
from .teacher import build_teacher

log = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("data_type", "num_languages", "bilingual_vs_multilingual", "architecture_ablation")

# (loss_variant, input_variant, projection_variant) of the five ablation runs.
ABLATIONS = {
    0: ("align_plus_mean", "weighted_layers", "bottleneck"),
    1: ("align_only", "weighted_layers", "bottleneck"),
    2: ("align_plus_mean", "weighted_layers", "linear"),
    3: ("align_plus_mean", "last_layer", "bottleneck"),
    4: ("align_plus_mean", "last_layer", "identity"),
}

STUDENT_VOCAB_SAMPLE = 2000  # sentences per register and language fed to the student tokenizer


def desk_transfer_config(**overrides) -> TransferConfig:
    """Optimiser settings that make one epoch enough at desk scale."""
    base = dict(learning_rate=1.0, batch_size=16, epochs=1, grad_clip=1.0, chunk_size=16)
    base.update(overrides)
    return TransferConfig(**base)


@dataclass
class ExperimentSpec:
    kind: str = "data_type"
    conditions: tuple[str, ...] | None = None
    num_languages: int = 5
    language_counts: tuple[int, ...] = (5, 10, 20)
    pairs_per_language: int = 5000
    english_stream: int = 20000
    pool_size: int = 20000
    pool_caption_fraction: float = 0.3
    pool_noise: float = 0.1
    held_out: int = 100
    retrieval_n: int = 100
    probe_train: int = 2000
    probe_test: int = 500
    em_iterations: int = 5
    prior_strength: float = 5.0
    caption_oversample: float = 2.0
    classifier_size: int = 2000
    teacher_vocab_size: int = 512
    student_vocab_size: int = 2048
    hidden_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 64
    max_positions: int = 64
    feature_strength: float = 4.0
    bilingual_epochs: int | None = None
    ablations: tuple[int, ...] = (0, 1, 2, 3, 4)
    workers: int = 1
    seed: int = 0
    transfer: TransferConfig = field(default_factory=desk_transfer_config)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; choose from {EXPERIMENT_KINDS}")
        if self.conditions is None:
            self.conditions = {"data_type": CONDITIONS, "architecture_ablation": ("task_mt",)}.get(
                self.kind, ("caption_like",))
        self.conditions = tuple(self.conditions)
        self.language_counts = tuple(int(n) for n in self.language_counts)
        self.ablations = tuple(int(a) for a in self.ablations)
        if not self.conditions:
            raise ValueError("no conditions")
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ValueError(f"unknown condition {c!r}; choose from {CONDITIONS}")
        if len(set(self.conditions)) != len(self.conditions):
            raise ValueError("duplicate condition")
        if self.kind != "data_type":
            if len(self.conditions) != 1 or self.conditions[0] == "english_only":
                raise ValueError(f"{self.kind} takes exactly one bilingual condition")
        if self.kind == "architecture_ablation":
            if self.conditions != ("task_mt",):
                raise ValueError("architecture_ablation runs on task_mt")
            if not self.ablations or any(a not in ABLATIONS for a in self.ablations):
                raise ValueError(f"ablation ids must come from {sorted(ABLATIONS)}")
        needs_languages = self.conditions != ("english_only",)
        counts = self.language_counts if self.kind == "num_languages" else (self.num_languages,)
        if not counts or (needs_languages and min(counts) < 1) or min(counts) < 0:
            raise ValueError("language list must be non-empty except for english_only")
        if self.retrieval_n > self.held_out:
            raise ValueError("retrieval_n exceeds held_out")
        for name in ("pairs_per_language", "held_out", "retrieval_n", "probe_train", "probe_test",
                     "em_iterations", "teacher_vocab_size", "student_vocab_size", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.bilingual_epochs is not None and self.bilingual_epochs < 1:
            raise ValueError("bilingual_epochs must be positive")

    def run_transfer_config(self) -> TransferConfig:
        return replace(self.transfer, workers=self.workers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditions"] = list(self.conditions)
        return d


@dataclass
class MetricsReport:
    """One report row: the metrics of a single trained student."""

    run: str
    kind: str
    condition: str
    languages: list[str]
    trained_languages: list[str]
    retrieval: dict[str, float]
    proxy: dict[str, float]
    english_retention: float
    teacher_probe: float
    teacher_mse: dict[str, list[float]]
    teacher_mse_before: dict[str, list[float]]
    target_layers: list[int]
    head_parameters: int
    projection: list[str]
    epochs: int
    loss_first: float
    loss_final: float
    loss_log: str

    def __post_init__(self):
        values = list(self.retrieval.values()) + list(self.proxy.values())
        values += [self.english_retention, self.teacher_probe]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("accuracies must lie in [0, 1]")
        missing = [lang for lang in self.languages if lang not in self.retrieval or lang not in self.proxy]
        if missing:
            raise ValueError(f"report misses languages {missing}")

    @property
    def retrieval_avg(self) -> float:
        return float(np.mean([self.retrieval[k] for k in self.languages])) if self.languages else 0.0

    @property
    def proxy_avg(self) -> float:
        return float(np.mean([self.proxy[k] for k in self.languages])) if self.languages else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsReport":
        return cls(**json.loads(line))


class StageError(RuntimeError):
    def __init__(self, stage: str, digest: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed (input digest {digest}): {cause}")
        self.stage = stage
        self.digest = digest


def input_digest(*parts: Iterable) -> str:
    h = hashlib.sha256()
    for part in parts:
        for x in part:
            h.update(repr(x).encode("utf-8"))
            h.update(b"\x00")
        h.update(b"\x01")
    return h.hexdigest()[:16]


def _stage(name: str, inputs: Sequence[Iterable], fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(name, input_digest(*inputs), exc) from exc


@dataclass
class _World:
    """State shared by all runs over one language set."""

    suite: SyntheticSuite
    teacher_vocab: Vocabulary
    student_vocab: Vocabulary
    teacher: Encoder
    student_config: EncoderConfig
    student_init: dict
    probe: object
    teacher_probe: float
    english: list
    retrieval_pairs: dict[str, list]
    proxy_sets: dict[str, tuple]
    mse_items: dict[str, list]
    priors: dict[str, tuple] = field(default_factory=dict)
    corpora: dict[str, corpora.ConditionCorpus] = field(default_factory=dict)
    links: dict[str, dict] = field(default_factory=dict)


class ExperimentRunner:
    def __init__(self, spec: ExperimentSpec, out_dir: str | Path):
        self.spec = spec
        self.out = Path(out_dir)
        self._classifier = None

    # ------------------------------------------------------------- shared
    def _classifier_for(self):
        if self._classifier is None:
            self._classifier = corpora.train_suite_classifier(self.spec.seed, self.spec.classifier_size)
        return self._classifier

    def _build_world(self, num_languages: int, tag: str) -> _World:
        s = self.spec
        suite = _stage("corpora", [[num_languages, s.seed]], corpora.build_suite, num_languages,
                       s.pairs_per_language, s.english_stream, s.pool_size, s.held_out, s.probe_train,
                       s.probe_test, s.pool_caption_fraction, s.pool_noise, s.seed)
        teacher_corpus = suite.english_stream + suite.caption + suite.generic
        tv = _stage("tokenize", [teacher_corpus], train_bpe, teacher_corpus, s.teacher_vocab_size)
        student_corpus = list(suite.english_stream)
        n = STUDENT_VOCAB_SAMPLE
        for spec in suite.specs:
            student_corpus += [p.target for p in suite.pools[spec.lang][:2 * n]]
            student_corpus += [encipher(x, spec)[0] for x in suite.task[:n]]
        sv = _stage("tokenize", [student_corpus], train_bpe, student_corpus, s.student_vocab_size)
        vocab_dir = self.out / "vocab" / tag
        vocab_dir.mkdir(parents=True, exist_ok=True)
        save_vocab(tv, vocab_dir / "teacher.bpe")
        save_vocab(sv, vocab_dir / "student.bpe")

        shape = dict(hidden_dim=s.hidden_dim, num_layers=s.num_layers, num_heads=s.num_heads,
                     ffn_dim=s.ffn_dim, max_positions=s.max_positions)
        teacher = build_teacher(EncoderConfig(len(tv), seed=2 * s.seed + 1, **shape), tv, COLORS,
                                s.feature_strength)
        save_checkpoint(vocab_dir / "teacher.ckpt", teacher.config, teacher.params)
        student_config = EncoderConfig(len(sv), seed=2 * s.seed + 2, **shape)

        labels_train = corpora.probe_labels(suite.probe_train)
        labels_test = corpora.probe_labels(suite.probe_test)
        probe = _stage("probe", [suite.probe_train], train_probe, teacher,
                       [encode(tv, x).token_ids for x in suite.probe_train], labels_train)
        teacher_acc = probe.accuracy(
            teacher_pooled(teacher, [encode(tv, x).token_ids for x in suite.probe_test], probe.layer), labels_test)

        retrieval_pairs = {}
        proxy_sets = {"en": ([encode(sv, x).token_ids for x in suite.probe_test], labels_test)}
        mse_items = {"en": corpora.english_items(suite.held_out, tv, sv)}
        for spec in suite.specs:
            retrieval_pairs[spec.lang] = [
                (encode(tv, x).token_ids, encode(sv, encipher(x, spec)[0]).token_ids) for x in suite.held_out
            ]
            proxy_sets[spec.lang] = ([encode(sv, encipher(x, spec)[0]).token_ids for x in suite.probe_test],
                                     labels_test)
            mse_items[spec.lang] = corpora.gold_items(suite.held_out, spec, tv, sv)
        english = _stage("tokenize", [suite.english_stream], corpora.english_items, suite.english_stream, tv, sv)
        return _World(suite, tv, sv, teacher, student_config, init_params(student_config), probe, teacher_acc,
                      english, retrieval_pairs, proxy_sets, mse_items)

    def _condition(self, world: _World, condition: str):
        """Selected pairs and word links for every language of the world, built once."""
        if condition in world.corpora:
            return world.corpora[condition], world.links[condition]
        s = self.spec
        suite = world.suite
        kwargs = {}
        if condition == "caption_like":
            kwargs = dict(classifier=self._classifier_for(), embed=CipherEmbedder(suite.specs, seed=s.seed),
                          oversample=s.caption_oversample)
        pool_inputs = [[len(v) for v in suite.pools.values()], [condition, s.pairs_per_language]]
        corpus = _stage("filter" if condition == "caption_like" else "corpora", pool_inputs,
                        corpora.build_condition_corpus, condition, suite.specs, s.pairs_per_language,
                        suite.task, suite.caption, suite.pools, seed=s.seed, **kwargs)
        for lang in corpus.bilingual:
            if lang not in world.priors:
                world.priors[lang] = _stage("align", [[lang], [p.source for p in suite.pools[lang]]],
                                            corpora.pool_priors, suite.pools[lang], s.em_iterations,
                                            s.prior_strength, s.workers)
        links = _stage("align", [[condition], [p for v in corpus.bilingual.values() for p in v]],
                       corpora.align_condition, corpus, world.priors, s.em_iterations, s.workers)
        world.corpora[condition] = corpus
        world.links[condition] = links
        return corpus, links

    # --------------------------------------------------------------- runs
    def _train_and_report(self, world: _World, label: str, condition: str, trained: Sequence[str],
                          config: TransferConfig) -> MetricsReport:
        languages = world.suite.languages
        run_dir = self.out / "runs" / label
        run_dir.mkdir(parents=True, exist_ok=True)
        items = list(world.english)
        if condition != "english_only":
            corpus, links = self._condition(world, condition)
            (run_dir / "align").mkdir(exist_ok=True)
            for lang in trained:
                pairs = corpus.bilingual[lang]
                items += corpora.bilingual_items(pairs, links[lang], lang, world.teacher_vocab, world.student_vocab)
                write_pharaoh(links[lang], run_dir / "align" / f"{lang}.pharaoh")
                with open(run_dir / "align" / f"{lang}.pairs.tsv", "w", encoding="utf-8") as fh:
                    fh.writelines(f"{a}\t{b}\t{lang}\n" for a, b in pairs)
                if lang in corpus.scored:
                    write_scored_pairs(corpus.scored[lang], run_dir / "align" / f"{lang}.scored.tsv")
        student = Encoder(world.student_config, {k: v.copy() for k, v in world.student_init.items()})
        heads = create_heads(config, student)
        mse_langs = ["en"] + list(languages)
        before = {lang: eval_teacher_mse(student, heads, world.teacher, world.mse_items[lang], config)
                  for lang in mse_langs}
        result = _stage("transfer", [[label], [len(items)]], train_transfer, world.teacher, student, heads, items,
                        config, log_path=run_dir / "transfer_log.jsonl")
        save_checkpoint(run_dir / "student.ckpt", student.config, student.params, heads_to_sections(heads))

        def evaluate():
            retrieval = {lang: eval_retrieval(student, heads, world.teacher, world.retrieval_pairs[lang],
                                              self.spec.retrieval_n) for lang in languages}
            proxy = eval_proxy_task(world.teacher, student, heads,
                                    {lang: world.proxy_sets[lang] for lang in mse_langs}, world.probe)
            mse = {lang: eval_teacher_mse(student, heads, world.teacher, world.mse_items[lang], config)
                   for lang in mse_langs}
            return retrieval, proxy, mse

        retrieval, proxy, mse = _stage("evaluate", [[label]], evaluate)
        return MetricsReport(
            run=label, kind=self.spec.kind, condition=condition, languages=list(languages),
            trained_languages=list(trained),
            retrieval=retrieval, proxy=proxy, english_retention=proxy["en"], teacher_probe=world.teacher_probe,
            teacher_mse=mse, teacher_mse_before=before, target_layers=[h.target_layer for h in heads],
            head_parameters=sum(h.num_parameters for h in heads),
            projection=[config.loss_variant, config.input_variant, config.projection_variant],
            epochs=config.epochs, loss_first=result.log[0].total, loss_final=result.log[-1].total,
            loss_log=str(Path("runs") / label / "transfer_log.jsonl"),
        )

    def _plan(self):
        """(world size, label, condition, language subset or None for all, config) per run."""
        s = self.spec
        cfg = s.run_transfer_config()
        if s.kind == "data_type":
            for c in s.conditions:
                yield s.num_languages, c, c, None, cfg
        elif s.kind == "num_languages":
            for n in s.language_counts:
                yield n, f"languages_{n}", s.conditions[0], None, cfg
        elif s.kind == "bilingual_vs_multilingual":
            yield s.num_languages, "multilingual", s.conditions[0], None, cfg
            bi = replace(cfg, epochs=s.bilingual_epochs or cfg.epochs)
            for i in range(s.num_languages):
                yield s.num_languages, f"bilingual_x{i:02d}", s.conditions[0], [f"x{i:02d}"], bi
        else:
            for a in s.ablations:
                loss, inp, proj = ABLATIONS[a]
                yield s.num_languages, f"exp{a}", "task_mt", None, replace(
                    cfg, loss_variant=loss, input_variant=inp, projection_variant=proj)

    def run(self) -> list[MetricsReport]:
        self.out.mkdir(parents=True, exist_ok=True)
        write_config(self.spec, self.out / "experiment.cfg")
        worlds: dict[int, _World] = {}
        reports = []
        metrics_path = self.out / "metrics.jsonl"
        with open(metrics_path, "w", encoding="utf-8") as fh:
            for n, label, condition, subset, cfg in self._plan():
                if n not in worlds:
                    worlds.clear()
                    worlds[n] = self._build_world(n, f"languages_{n}")
                world = worlds[n]
                trained = subset if subset is not None else (
                    [] if condition == "english_only" else world.suite.languages)
                log.info("run %s (%s, %d bilingual languages)", label, condition, len(trained))
                report = self._train_and_report(world, label, condition, trained, cfg)
                reports.append(report)
                fh.write(report.to_json() + "\n")
                fh.flush()
        write_report_tsv(reports, self.out / "report.tsv")
        return reports


def run_experiment(spec: ExperimentSpec, out_dir: str | Path) -> list[MetricsReport]:
    """Run every training of ``spec``; writes metrics.jsonl, report.tsv and per-run artefacts."""
    return ExperimentRunner(spec, out_dir).run()


def _pct(x: float | None) -> str:
    return "" if x is None else f"{100.0 * x:.1f}"


def write_report_tsv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    """Rows are runs; columns are retrieval then probe accuracy per language, in percent."""
    langs = sorted({lang for r in reports for lang in r.languages})
    header = ["run", "data"] + [f"ret_{x}" for x in langs] + ["ret_avg", "probe_en"]
    header += [f"probe_{x}" for x in langs] + ["probe_avg", "teacher_probe", "mse_en_last"]
    lines = ["\t".join(header)]
    for r in reports:
        row = [r.run, CONDITION_LABELS[r.condition]]
        row += [_pct(r.retrieval.get(x)) for x in langs] + [_pct(r.retrieval_avg if r.languages else None)]
        row += [_pct(r.english_retention)] + [_pct(r.proxy.get(x) if x in r.languages else None) for x in langs]
        row += [_pct(r.proxy_avg if r.languages else None), _pct(r.teacher_probe), f"{r.teacher_mse['en'][-1]:.4f}"]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path: str | Path) -> list[MetricsReport]:
    with open(path, encoding="utf-8") as fh:
        return [MetricsReport.from_json(line) for line in fh if line.strip()]


def load_spec(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentSpec:
    """Spec from a key=value file (if any) with ``overrides`` applied last."""
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, ExperimentSpec, overrides=overrides, source=str(path or "<defaults>"))
