"""Command line: gen-data, train, evaluate, decode, analyze, ablation."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data, harness
from . import model as M
from .data import TaskConfig, Vocabulary
from .harness import TrainConfig


def _load_config(args) -> TrainConfig:
    mapping = {}
    if getattr(args, "config", None):
        mapping.update(harness.parse_key_values(Path(args.config).read_text(encoding="utf-8")))
    for item in getattr(args, "set", None) or []:
        mapping.update(harness.parse_key_values(item))
    return TrainConfig.from_mapping(mapping)


def _split(data_dir, name) -> list:
    path = Path(data_dir) / f"{name}.tsv"
    return data.read_corpus(path) if path.exists() else []


def cmd_gen_data(args):
    n_total = args.train + args.val + args.test
    cfg = TaskConfig(
        seed=args.seed,
        n_examples=n_total,
        salient_fraction=args.salient_fraction,
        oov_rate=args.oov_rate,
        distractor_rate=args.distractor_rate,
    )
    pairs = data.synth_task_generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cuts = {"train": (0, args.train), "val": (args.train, args.train + args.val), "test": (args.train + args.val, n_total)}
    for name, (lo, hi) in cuts.items():
        data.write_corpus(out / f"{name}.tsv", pairs[lo:hi])
    data.write_task_meta(out / "task.meta", cfg, train=args.train, val=args.val, test=args.test)
    print(f"wrote {n_total} examples to {out}")


def cmd_train(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    train_pairs, val_pairs = _split(args.data, "train"), _split(args.data, "val")
    res = harness.train(cfg, train_pairs, val_pairs, args.out)
    eval_pairs = _split(args.data, args.eval_split)
    if eval_pairs:
        ev = harness.evaluate(res.params, res.vocab, eval_pairs, cfg.beam_size, res.max_decode_len,
                              cfg.block_trigrams, "final", args.eval_split, args.out)
        harness.analyze_attention(res.params, res.vocab, eval_pairs, args.out)
        print(" ".join(f"{k}={ev.row[k]:.4f}" for k in harness.METRIC_COLUMNS))
    print(f"trained {res.log[-1]['iteration'] if res.log else 0} iterations; checkpoint {res.checkpoints[-1]}")


def _vocab(args):
    return Vocabulary.load(args.vocab) if args.vocab else None


def cmd_evaluate(args):
    pairs = data.read_corpus(args.corpus)
    ev = harness.evaluate_checkpoint(args.checkpoint, pairs, _vocab(args), args.beam, args.max_len,
                                     args.block_trigrams, args.split, args.out)
    print(" ".join(f"{k}={ev.row[k]:.4f}" for k in harness.METRIC_COLUMNS))


def cmd_decode(args):
    ck = M.load_checkpoint(args.checkpoint)
    vocab = harness.check_vocab(ck, _vocab(args))
    sources = [line.split("\t", 1)[0].split() for line in Path(args.input).read_text(encoding="utf-8").splitlines() if line.strip()]
    max_len = args.max_len or int(ck.echo.get("train.resolved_max_decode_len", 40))
    block = args.block_trigrams
    if block is None:
        block = ck.echo.get("train.block_trigrams", "False") == "True"
    outs = harness.decode_sources(ck.params, vocab, sources, args.beam, max_len, block)
    text = "".join(" ".join(o) + "\n" for o in outs)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_analyze(args):
    rows = harness.analyze_checkpoint(args.checkpoint, data.read_corpus(args.corpus), _vocab(args), args.out)
    print(f"analyzed {len(rows)} examples into {args.out}")


def cmd_ablation(args):
    cfg = _load_config(args)
    table = harness.run_ablation(cfg, _split(args.data, "train"), _split(args.data, "val"),
                                 _split(args.data, "test"), args.out, args.workers)
    for row in table:
        if row["seed"] == "mean":
            print(f"{row['variant']:<22} rouge1={row['rouge1']:.4f} dup3={row['dup3']:.4f} "
                  f"lvar={row['mean_local_variance']:.5f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnvar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic salient-copy corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=200)
    g.add_argument("--test", type=int, default=200)
    g.add_argument("--salient-fraction", type=float, default=0.3)
    g.add_argument("--oov-rate", type=float, default=0.05)
    g.add_argument("--distractor-rate", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    def config_args(sp):
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    t = sub.add_parser("train", help="pretrain, fine-tune, then evaluate and analyze")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-split", default="test")
    config_args(t)
    t.set_defaults(func=cmd_train)

    def ckpt_args(sp, corpus=True):
        sp.add_argument("--checkpoint", required=True)
        if corpus:
            sp.add_argument("--corpus", required=True)
        sp.add_argument("--vocab", help="vocabulary file that must match the checkpoint")

    e = sub.add_parser("evaluate", help="decode a split and write metrics.csv and decoded.txt")
    ckpt_args(e)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--beam", type=int, default=4)
    e.add_argument("--max-len", type=int)
    e.add_argument("--block-trigrams", action=argparse.BooleanOptionalAction, help="default: as trained")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("decode", help="summarize sources, one per line")
    ckpt_args(d, corpus=False)
    d.add_argument("--input", required=True)
    d.add_argument("--output")
    d.add_argument("--beam", type=int, default=4)
    d.add_argument("--max-len", type=int)
    d.add_argument("--block-trigrams", action=argparse.BooleanOptionalAction, help="default: as trained")
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("analyze", help="dump attention matrices and statistics")
    ckpt_args(a)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("ablation", help="compare the four model variants over seeds")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--workers", type=int, default=1)
    config_args(b)
    b.set_defaults(func=cmd_ablation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ValueError, harness.TrainingAborted, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0
