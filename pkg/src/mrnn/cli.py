"""Command-line entry point: ``mrnn <command> [options]``.

Exit codes: 0 success, 2 usage, 3 I/O or file format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus
from .corpus import DimensionMismatchError, FormatError, TruncatedFileError, Vocabulary
from .decode import DecodeLimits, beam_search, generate_greedy, generate_sample, read_hypotheses, write_hypotheses
from .metrics import IdfTable, corpus_bleu, corpus_perplexity, write_eval_report
from .model import MRnnConfig, Variant, load_checkpoint, refine_feature
from .rerank import (
    FeatureKind,
    RerankConfig,
    Similarity,
    consensus_rerank,
    nearest_neighbors,
    oracle_rerank,
    similarity_fn,
    write_rerank_report,
)
from .retrieval import (
    evaluate_image_retrieval,
    evaluate_sentence_retrieval,
    write_retrieval_metrics,
    write_score_matrix,
)
from .training import (
    DivergenceError,
    TrainHyperparams,
    check_gradients,
    gradcheck_config,
    save_train_state,
    train,
    train_state_from_checkpoint,
    write_cost_log,
)

log = logging.getLogger("mrnn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-6


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment. Keys use option spelling."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _stamp(path, args) -> None:
    """Prefix a report with a timestamp comment unless --reproducible."""
    if getattr(args, "reproducible", False):
        return
    path = Path(path)
    stamp = _dt.datetime.now().isoformat(timespec="seconds")
    path.write_text(f"# created {stamp}\n" + path.read_text(encoding="utf-8"), encoding="utf-8")


def _vocab_from_meta(meta: dict) -> Vocabulary:
    if "vocab" not in meta:
        raise FormatError("checkpoint carries no vocabulary")
    return Vocabulary.from_tokens(meta["vocab"].split(" "))


def _load_model(path):
    ckpt = load_checkpoint(path)
    return ckpt, _vocab_from_meta(ckpt.meta)


def _load_split(args, vocab=None, name=None):
    vocab, images, store = corpus.load_dataset(args.captions, args.features, vocab)
    if name is None:
        return vocab, images, store
    chosen = corpus.split(images, name)
    if not chosen:
        raise UsageError(f"no images in split {name!r}")
    return vocab, chosen, store


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.images < 1:
        raise UsageError("--images must be >= 1")
    store, records = corpus.generate_synthetic_dataset(
        args.images, args.seed, args.captions_per_image, args.test, args.val
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_captions(out / "captions.jsonl", records)
    corpus.save_feature_store(store, out / "features.mrnf")
    n = {s: sum(r["split"] == s for r in records) for s in ("train", "val", "test")}
    print(f"wrote {len(records)} images (train {n['train']}, val {n['val']}, test {n['test']}), "
          f"feature dim {store.dim}, to {out}")
    return EXIT_OK


def _config_from_args(args, vocab_size: int, dim_image: int) -> MRnnConfig:
    return MRnnConfig(
        vocab_size=vocab_size,
        dim_image=dim_image,
        dim_embed1=args.dim_embed1,
        dim_embed2=args.dim_recurrent,
        dim_recurrent=args.dim_recurrent,
        dim_multimodal=args.dim_multimodal,
        variant=Variant(args.variant),
    )


def cmd_train(args) -> int:
    hyper = TrainHyperparams(
        learning_rate=args.learning_rate,
        momentum=args.momentum,
        clip_norm=args.clip_norm,
        epochs=args.epochs,
        lam=args.lam,
        seed=args.seed,
        lr_decay=args.lr_decay,
        lr_decay_every=args.lr_decay_every,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        ckpt, vocab = _load_model(args.resume)
        config = ckpt.config
        state = train_state_from_checkpoint(ckpt)
        _, images, _ = _load_split(args, vocab)
    else:
        vocab, images, store = _load_split(args)
        config = _config_from_args(args, len(vocab), store.dim)
    train_set = corpus.split(images, "train")
    if not train_set:
        raise UsageError("no training images")
    val_set = corpus.split(images, "val")
    meta = {"vocab": " ".join(vocab.tokens)}
    log_path = out / "cost_log.csv"
    if state is None and log_path.exists():
        log_path.unlink()

    def on_epoch(st, entries):
        save_train_state(out / f"epoch_{st.epoch:04d}.mrnc", config, st, hyper, meta)
        write_cost_log(log_path, entries, append=True,
                       header_comment=None if args.reproducible else
                       f"created {_dt.datetime.now().isoformat(timespec='seconds')}")

    state, history = train(train_set, config, hyper, val_set=val_set, state=state, on_epoch=on_epoch)
    save_train_state(out / "final.mrnc", config, state, hyper, meta)
    if history:
        last = [e for e in history if e.split == "train"][-1].report
        print(f"variant {config.variant.value}: epoch {state.epoch} train bits/word "
              f"{last.avg_bits_per_word:.6f} perplexity {last.perplexity:.6f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt, vocab = _load_model(args.checkpoint)
    _, images, _ = _load_split(args, vocab, args.split)
    limits = DecodeLimits(args.max_len)
    rows, times = [], []
    for k, im in enumerate(images):
        t0 = time.perf_counter()
        if args.mode == "greedy":
            hyps = [generate_greedy(ckpt.params, ckpt.config, im.feature, limits)]
        elif args.mode == "sample":
            hyps = [generate_sample(ckpt.params, ckpt.config, im.feature, limits, seed=args.seed + k)]
        else:
            hyps = beam_search(ckpt.params, ckpt.config, im.feature, args.n, limits)
        times.append(time.perf_counter() - t0)
        rows.append((im.id, hyps))
    write_hypotheses(args.out, rows, vocab)
    print(f"{len(rows)} images, mean {1000 * statistics.fmean(times):.2f} ms per image ({args.mode})")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    ckpt, vocab = _load_model(args.checkpoint)
    _, images, _ = _load_split(args, vocab)
    test = corpus.split(images, args.split)
    if not test:
        raise UsageError(f"no images in split {args.split!r}")
    metrics, rows = {}, []
    if args.direction in ("image", "both"):
        run = evaluate_image_retrieval(ckpt.params, ckpt.config, test)
        metrics["image"] = run.metrics
        rows += run.score_rows
    if args.direction in ("sentence", "both"):
        marginal = corpus.split(images, "train")
        if not marginal:
            raise UsageError("sentence retrieval needs training images for the marginal set")
        if args.marginal_sample and args.marginal_sample < len(marginal):
            rng = np.random.default_rng(args.seed)
            pick = sorted(rng.choice(len(marginal), size=args.marginal_sample, replace=False))
            marginal = [marginal[i] for i in pick]
        run = evaluate_sentence_retrieval(ckpt.params, ckpt.config, test, marginal, not args.no_normalize)
        metrics["sentence"] = run.metrics
        rows += run.score_rows
    write_retrieval_metrics(args.metrics_out, metrics)
    _stamp(args.metrics_out, args)
    if args.scores_out:
        write_score_matrix(args.scores_out, rows)
    for direction, m in metrics.items():
        r = " ".join(f"R@{k} {v:.1f}" for k, v in m.r_at.items())
        print(f"{direction} retrieval: {r} Med r {m.med_r:g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = corpus.read_captions(args.captions)
    refs = {
        rec["image_id"]: [corpus.tokenize(c) for c in rec["captions"]]
        for rec in records
        if rec.get("split", "train") == args.split
    }
    bleu = ppl = None
    if args.hypotheses:
        hyps = read_hypotheses(args.hypotheses)
        missing = [i for i in hyps if i not in refs]
        if missing:
            raise UsageError(f"no {args.split} references for images {missing[:5]}")
        ids = sorted(hyps)
        cands = [hyps[i][0]["tokens"] for i in ids]
        bleu = corpus_bleu(cands, [refs[i] for i in ids], args.max_n)
        print(" ".join(f"B-{n} {b:.4f}" for n, b in enumerate(bleu.b, 1))
              + f" (BP {bleu.bp:.4f}, r {bleu.r}, c {bleu.c})")
    if args.checkpoint:
        if not args.features:
            raise UsageError("--checkpoint needs --features for perplexity")
        ckpt, vocab = _load_model(args.checkpoint)
        _, images, _ = _load_split(args, vocab, args.split)
        ppl = corpus_perplexity(ckpt.params, ckpt.config, images)
        print(f"perplexity {ppl:.6f}")
    if bleu is None and ppl is None:
        raise UsageError("nothing to evaluate: give --hypotheses and/or --checkpoint")
    write_eval_report(args.out, bleu, ppl)
    _stamp(args.out, args)
    return EXIT_OK


def cmd_rerank(args) -> int:
    ckpt, vocab = _load_model(args.checkpoint)
    _, images, store = _load_split(args, vocab)
    train_set = corpus.split(images, "train")
    by_id = {im.id: im for im in images}
    hyps = read_hypotheses(args.hypotheses)
    cfg = RerankConfig(args.n, args.k, args.m, Similarity(args.similarity), FeatureKind(args.feature))
    if cfg.k_neighbors > len(train_set):
        raise UsageError(f"k={cfg.k_neighbors} exceeds the {len(train_set)} training images")
    idf = IdfTable.build([im.raw_captions for im in train_set])
    sim = similarity_fn(cfg.similarity, idf)

    def feat(v):
        return refine_feature(ckpt.params, v) if cfg.feature_kind is FeatureKind.REFINED else v

    ref_store = corpus.FeatureStore(
        len(feat(train_set[0].feature)), {im.id: feat(im.feature) for im in train_set}
    )
    rows, oracle_wins, cons_top, orac_top = [], 0, [], []
    for image_id in sorted(hyps):
        if image_id not in by_id:
            raise UsageError(f"hypotheses for unknown image {image_id}")
        cands = [h["tokens"] for h in hyps[image_id][: cfg.n_hypotheses] if h["tokens"]]
        if not cands:
            continue
        nn_ids = nearest_neighbors(feat(by_id[image_id].feature), ref_store, cfg.k_neighbors, exclude_id=image_id)
        neighbor_caps = [c for i in nn_ids for c in by_id[i].raw_captions]
        reranked = consensus_rerank(cands, neighbor_caps, cfg, sim)
        gts = by_id[image_id].raw_captions
        if args.oracle:
            oracle = oracle_rerank(cands, gts, sim)
            o = oracle[0].score
            c = max(sim(reranked[0].tokens, g) for g in gts)
            orac_top.append(o)
            cons_top.append(c)
            oracle_wins += o >= c
            rows += [(image_id, r) for r in oracle]
        else:
            rows += [(image_id, r) for r in reranked]
    write_rerank_report(args.out, rows)
    _stamp(args.out, args)
    print(f"reranked {len({r[0] for r in rows})} images (k={cfg.k_neighbors}, m={cfg.m_nearest_captions}, "
          f"{cfg.similarity.value}, {cfg.feature_kind.value} features)")
    if args.oracle and orac_top:
        print(f"oracle top-1 {statistics.fmean(orac_top):.4f} >= consensus top-1 "
              f"{statistics.fmean(cons_top):.4f} on {oracle_wins}/{len(orac_top)} images")
        if oracle_wins != len(orac_top):
            raise NumericalFailure("oracle bound violated")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    variants = [Variant(v) for v in args.variants] if args.variants else list(Variant)
    worst = 0.0
    t0 = time.perf_counter()
    for v in variants:
        res = check_gradients(gradcheck_config(v), seed=args.seed, h=args.h, n_coords=args.coords)
        status = "ok" if res["max_rel_error"] < args.tolerance else "FAIL"
        print(f"{v.value:28s} coords {res['n_coords']:4d} max rel err {res['max_rel_error']:.3e} {status}")
        worst = max(worst, res["max_rel_error"])
    print(f"worst {worst:.3e} in {time.perf_counter() - t0:.1f}s")
    if worst >= args.tolerance:
        raise NumericalFailure(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_data_args(p, features_required=True):
    p.add_argument("--captions", required=True, help="caption JSONL file")
    p.add_argument("--features", required=features_required, help="MRNF feature file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--config", help="flat key = value defaults file")
    parser.add_argument("--reproducible", action="store_true", help="omit timestamps from reports")
    parser.add_argument("--threads", type=_positive_int, default=1, help="BLAS threads (1 = deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic shapes corpus")
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--captions-per-image", type=int, default=3)
    p.add_argument("--test", type=int, default=0, help="number of test images (taken last)")
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train by full BPTT on the perplexity cost")
    _add_data_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--variant", default="full", choices=[v.value for v in Variant])
    p.add_argument("--dim-embed1", type=_positive_int, default=128)
    p.add_argument("--dim-recurrent", type=_positive_int, default=256)
    p.add_argument("--dim-multimodal", type=_positive_int, default=512)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--lr-decay", type=float, default=0.5)
    p.add_argument("--lr-decay-every", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode captions for a split")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=("greedy", "sample", "beam"), default="greedy")
    p.add_argument("--n", type=_positive_int, default=10, help="beam width")
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="hypothesis JSONL output")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("retrieve", help="image and sentence retrieval metrics")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--direction", choices=("image", "sentence", "both"), default="both")
    p.add_argument("--no-normalize", action="store_true", help="rank sentences by raw probability")
    p.add_argument("--marginal-sample", type=int, default=0, help="subsample the marginal image set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics-out", required=True)
    p.add_argument("--scores-out")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="corpus BLEU and/or perplexity")
    _add_data_args(p, features_required=False)
    p.add_argument("--hypotheses")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--max-n", type=_positive_int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rerank", help="nearest-neighbour consensus reranking")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--similarity", choices=[s.value for s in Similarity], default="bleu")
    p.add_argument("--feature", choices=[f.value for f in FeatureKind], default="original")
    p.add_argument("--n", type=_positive_int, default=10)
    p.add_argument("--k", type=_positive_int, default=60)
    p.add_argument("--m", type=_positive_int, default=175)
    p.add_argument("--oracle", action="store_true", help="rerank against groundtruth (upper bound)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("gradcheck", help="finite-difference check of every variant")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--coords", type=_positive_int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--variants", nargs="*", choices=[v.value for v in Variant])
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with config-file values as defaults so explicit flags still win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(raw) if action.type else raw
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, TruncatedFileError, DimensionMismatchError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
