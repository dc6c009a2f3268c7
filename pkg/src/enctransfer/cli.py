"""Command-line entry point: ``enctransfer <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .alignment import SYMMETRIZATIONS, align_words, read_pharaoh, write_pharaoh
from .data_filter import read_pair_pool, write_scored_pairs
from .encoder import Encoder, EncoderConfig, init_params, load_checkpoint, save_checkpoint
from .harness import corpora
from .harness.evaluate import eval_retrieval, eval_teacher_mse
from .harness.experiment import ExperimentSpec, load_spec, run_experiment
from .harness.synthetic import REGISTERS, COLORS, CipherEmbedder, EnglishGenerator, make_cipher_language, make_pool
from .harness.teacher import build_teacher
from .tokenizer import encode, load_vocab, read_corpus, save_vocab, train_bpe
from .transfer import create_heads, heads_from_sections, heads_to_sections, train_transfer

log = logging.getLogger("enctransfer")


def _read_pairs(path: str) -> list[tuple[str, str, str]]:
    """TSV rows source<TAB>target[<TAB>lang]; lang defaults to 'xx'."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ValueError(f"{path}:{n}: expected source<TAB>target")
            rows.append((parts[0], parts[1], parts[2] if len(parts) > 2 else "xx"))
    return rows


def _spec(args) -> ExperimentSpec:
    overrides = {"seed": str(args.seed)} if args.seed is not None else None
    return load_spec(args.config, overrides)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_tokenize_train(args) -> int:
    vocab = train_bpe(read_corpus(args.corpus), args.vocab_size)
    path = _out(args) / args.name
    save_vocab(vocab, path)
    print(f"{path}: {len(vocab)} tokens, {len(vocab.merges)} merges")
    return 0


def cmd_align(args) -> int:
    pairs = [(s, t) for s, t, _ in _read_pairs(args.pairs)]
    fwd = rev = None
    if args.prior_pool:
        pool = [(s, t) for s, t, _ in _read_pairs(args.prior_pool)]
        fwd, rev = corpora.pool_priors(pool, args.iterations, args.prior_strength, args.workers)
    links = align_words(pairs, args.iterations, fwd, rev, method=args.method, workers=args.workers)
    path = _out(args) / args.name
    write_pharaoh(links, path)
    print(f"{path}: {sum(len(x) for x in links)} links over {len(links)} pairs")
    return 0


def cmd_filter(args) -> int:
    spec = _spec(args)
    pool = read_pair_pool(args.pool)
    langs = sorted({p[2] for p in pool})
    specs = corpora.make_specs(args.languages, spec.seed)
    known = {s.lang for s in specs}
    if not set(langs) <= known:
        raise SystemExit(f"pool languages {sorted(set(langs) - known)} are not among the {args.languages} "
                         f"cipher languages of seed {spec.seed}")
    clf = corpora.train_suite_classifier(spec.seed, spec.classifier_size)
    by_lang = {lang: [(s, t) for s, t, x in pool if x == lang] for lang in langs}
    used = [s for s in specs if s.lang in by_lang]
    chosen = corpora.build_condition_corpus("caption_like", used, args.k, [], [], by_lang, classifier=clf,
                                            embed=CipherEmbedder(specs, seed=spec.seed),
                                            oversample=args.oversample, token_cap=args.token_cap)
    path = _out(args) / args.name
    write_scored_pairs([p for lang in langs for p in chosen.scored.get(lang, [])], path)
    print(f"{path}: kept {chosen.num_bilingual} pairs; classifier held-out F1 {clf.heldout_f1:.4f}")
    return 0


def cmd_cipher_gen(args) -> int:
    spec = _spec(args)
    out = _out(args)
    english = EnglishGenerator([spec.seed, args.register_seed]).sample(args.register, args.sentences)
    (out / f"en.{args.register}.txt").write_text("\n".join(english) + "\n", encoding="utf-8")
    specs = corpora.make_specs(args.languages, spec.seed)
    for s in specs:
        pairs = make_cipher_language(english, s)
        with open(out / f"{s.lang}.tsv", "w", encoding="utf-8") as fh:
            fh.writelines(f"{p.source}\t{p.target}\t{s.lang}\n" for p in pairs)
        write_pharaoh([p.gold for p in pairs], out / f"{s.lang}.gold.pharaoh")
        if args.pool_size:
            pool = make_pool(s, args.pool_size, spec.pool_caption_fraction, spec.pool_noise,
                             seed=spec.seed * 1000 + 500 + s.index)
            with open(out / f"{s.lang}.pool.tsv", "w", encoding="utf-8") as fh:
                fh.writelines(f"{p.source}\t{p.target}\t{s.lang}\n" for p in pool)
    print(f"{out}: {len(english)} sentences in {len(specs)} cipher languages")
    return 0


def _shape(spec: ExperimentSpec) -> dict:
    return dict(hidden_dim=spec.hidden_dim, num_layers=spec.num_layers, num_heads=spec.num_heads,
                ffn_dim=spec.ffn_dim, max_positions=spec.max_positions)


def _load_teacher(args, spec: ExperimentSpec, tv) -> Encoder:
    if args.teacher:
        cfg, params, _ = load_checkpoint(args.teacher)
        return Encoder(cfg, params)
    return build_teacher(EncoderConfig(len(tv), seed=2 * spec.seed + 1, **_shape(spec)), tv, COLORS,
                         spec.feature_strength)


def cmd_transfer(args) -> int:
    spec = _spec(args)
    config = spec.run_transfer_config()
    tv, sv = load_vocab(args.teacher_vocab), load_vocab(args.student_vocab)
    teacher = _load_teacher(args, spec, tv)
    if args.student:
        cfg, params, _ = load_checkpoint(args.student)
        student = Encoder(cfg, params)
    else:
        cfg = EncoderConfig(len(sv), seed=2 * spec.seed + 2, **_shape(spec))
        student = Encoder(cfg, init_params(cfg))
    items = corpora.english_items(read_corpus(args.english), tv, sv) if args.english else []
    if args.pairs:
        rows = _read_pairs(args.pairs)
        lengths = [(len(s.split()), len(t.split())) for s, t, _ in rows]
        links = read_pharaoh(args.alignments, lengths)
        for (s, t, lang), ls in zip(rows, links):
            items += corpora.bilingual_items([(s, t)], [ls], lang, tv, sv)
    if not items:
        raise SystemExit("nothing to train on: give --english and/or --pairs")
    heads = create_heads(config, student)
    out = _out(args)
    result = train_transfer(teacher, student, heads, items, config, log_path=out / "transfer_log.jsonl")
    save_checkpoint(out / "student.ckpt", student.config, student.params, heads_to_sections(heads))
    if not args.teacher:
        save_checkpoint(out / "teacher.ckpt", teacher.config, teacher.params)
    print(f"{out / 'student.ckpt'}: {len(items)} items, final loss {result.log[-1].total:.6f}")
    return 0


def cmd_eval(args) -> int:
    spec = _spec(args)
    config = spec.run_transfer_config()
    tv, sv = load_vocab(args.teacher_vocab), load_vocab(args.student_vocab)
    tcfg, tparams, _ = load_checkpoint(args.teacher)
    scfg, sparams, sections = load_checkpoint(args.student)
    teacher, student = Encoder(tcfg, tparams), Encoder(scfg, sparams)
    heads = heads_from_sections(sections, scfg.num_layers + 1, scfg.hidden_dim)
    if not heads:
        raise SystemExit(f"{args.student}: no projection heads in checkpoint")
    rows = _read_pairs(args.pairs)
    pairs = [(encode(tv, s).token_ids, encode(sv, t).token_ids) for s, t, _ in rows]
    result = {"retrieval": eval_retrieval(student, heads, teacher, pairs, min(args.n, len(pairs)))}
    result["teacher_mse_en"] = eval_teacher_mse(student, heads, teacher,
                                                corpora.english_items([s for s, _, _ in rows], tv, sv), config)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    spec = _spec(args)
    if args.workers is not None:
        spec.workers = args.workers
    reports = run_experiment(spec, _out(args))
    print((Path(args.out) / "report.tsv").read_text(encoding="utf-8"), end="")
    log.info("%d runs written to %s", len(reports), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="enctransfer", description=__doc__)
    p.add_argument("--config", help="key = value experiment config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tokenize-train", help="train a BPE vocabulary on a text corpus")
    s.add_argument("corpus")
    s.add_argument("--vocab-size", type=int, required=True)
    s.add_argument("--name", default="vocab.bpe")
    s.set_defaults(func=cmd_tokenize_train)

    s = sub.add_parser("align", help="word-align a TSV of sentence pairs")
    s.add_argument("pairs")
    s.add_argument("--iterations", type=int, default=5)
    s.add_argument("--prior-pool", help="TSV pool whose EM table becomes prior counts")
    s.add_argument("--prior-strength", type=float, default=5.0)
    s.add_argument("--method", choices=SYMMETRIZATIONS, default="grow-diag")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--name", default="alignments.pharaoh")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("filter", help="caption-like plus similarity selection over a cipher pool")
    s.add_argument("pool", help="TSV source<TAB>target<TAB>lang")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--languages", type=int, default=5, help="number of cipher languages for the embedder")
    s.add_argument("--oversample", type=float, default=2.0)
    s.add_argument("--token-cap", type=int, default=450)
    s.add_argument("--name", default="selected.tsv")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("transfer", help="train a student against a teacher")
    s.add_argument("--teacher-vocab", required=True)
    s.add_argument("--student-vocab", required=True)
    s.add_argument("--teacher", help="teacher checkpoint (default: build one from the config)")
    s.add_argument("--student", help="student checkpoint to start from (default: fresh init)")
    s.add_argument("--english", help="English identity stream, one sentence per line")
    s.add_argument("--pairs", help="TSV source<TAB>target<TAB>lang")
    s.add_argument("--alignments", help="word alignments for --pairs, Pharaoh format")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("eval", help="retrieval and teacher MSE for a trained student")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--teacher-vocab", required=True)
    s.add_argument("--student-vocab", required=True)
    s.add_argument("--pairs", required=True, help="held-out TSV source<TAB>target")
    s.add_argument("--n", type=int, default=100)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", help="run a full experiment from the config")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("cipher-gen", help="write English text, cipher translations, gold links and pools")
    s.add_argument("--languages", type=int, default=5)
    s.add_argument("--sentences", type=int, default=5000)
    s.add_argument("--register", choices=REGISTERS, default="task")
    s.add_argument("--register-seed", type=int, default=0)
    s.add_argument("--pool-size", type=int, default=0)
    s.set_defaults(func=cmd_cipher_gen)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "transfer" and bool(args.pairs) != bool(args.alignments):
        raise SystemExit("--pairs and --alignments go together")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
