"""Command-line entry point.

Subcommands: ``datagen``, ``train``, ``generate-negatives``, ``eval`` and
``compare-strategies``. Exit status is 0 on success, 1 for usage or
configuration errors and 2 for runtime failures (I/O, bad files).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, load_config
from .datagen import (
    GRAMMARS,
    generate_dataset,
    grammar_for_model,
    load_checkpoint,
    read_jsonl,
    save_checkpoint,
    write_jsonl,
)
from .evaluation import GapStrategy, difficulty_gap, recall_at_k
from .generator import generate_pool
from .scenegraph import load_lexicon, parse_scene_graph
from .training import TERMS, write_metrics_csv

log = logging.getLogger("tagsdc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(tokens):
    """Turn ``--key value`` / ``--key=value`` tokens into a dict."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens):
            value = tokens[i + 1]
            i += 2
        else:
            raise UsageError(f"flag --{key} needs a value")
        out[key] = value
    return out


def _load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    return model, grammar_for_model(model.config)


def _load_data(path, grammar):
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_jsonl(path, grammar.vocabulary())


# ---------------------------------------------------------------- commands

def cmd_datagen(args):
    data = generate_dataset(args.n, seed=args.seed, grammar=args.grammar)
    write_jsonl(data, args.out)
    log.info("wrote %d images to %s", len(data), args.out)
    return EXIT_OK


def cmd_train(args, extra):
    from .estimator import TagsDCMatcher

    cfg = load_config(args.config, _overrides(extra))
    if cfg.data:
        from .datagen import get_grammar

        data = _load_data(cfg.data, get_grammar(cfg.grammar))
    else:
        data = generate_dataset(cfg.n_images, seed=cfg.data_seed, grammar=cfg.grammar)
    est = TagsDCMatcher(**cfg.estimator_params())
    step_log = max(1, cfg.steps // 10)

    def progress(report):
        if (report.step + 1) % step_log == 0:
            log.info("step %d loss %.4f pool %.2f", report.step + 1, report.loss,
                     report.mean_pool_size)

    est.fit(data, callback=progress)
    save_checkpoint(est.model_, cfg.checkpoint)
    write_metrics_csv(est.reports_, cfg.metrics)
    if est.reports_:
        last = est.reports_[-1].parts
        print(" ".join(f"l_{t}={last[t]:.6f}" for t in TERMS))
    else:
        print("no steps run")
    print(f"checkpoint: {cfg.checkpoint}\nmetrics: {cfg.metrics}")
    return EXIT_OK


def cmd_generate(args):
    model, grammar = _load_model(args.checkpoint)
    data = _load_data(args.data, grammar)
    vocab, lexicon = grammar.vocabulary(), load_lexicon()
    rng = np.random.default_rng(args.seed)
    n = 0
    with open(args.out, "w") as fh:
        for im in data:
            cap = im.captions[0]
            pool = generate_pool(model, im, cap, parse_scene_graph(cap, lexicon),
                                 args.K, args.L, args.tau, rng, vocab, ratio=args.mask_ratio)
            for item in pool:
                fh.write(json.dumps({
                    "image_id": int(im.image_id),
                    "source": cap.text,
                    "synthetic": item.text,
                    "replaced_positions": list(item.replaced_positions),
                    "gold_wod": list(item.gold_wod),
                    "itm": item.itm,
                }) + "\n")
                n += 1
    log.info("wrote %d negatives for %d images to %s", n, len(data), args.out)
    return EXIT_OK


def run_eval(scorer, images, out=None):
    """Retrieval report for any model or scorer; optional CSV at ``out``."""
    report = recall_at_k(scorer, images)
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("direction", "k", "recall"))
            for direction, k, v in report.rows():
                w.writerow((direction, k, repr(v)))
            w.writerow(("rsum", "", repr(report.rsum)))
    return report


def summary_text(report):
    lines = [
        f"{d:>4}  " + "  ".join(f"R@{k}={v:.3f}" for k, v in sorted(t.items()))
        for d, t in (("i2t", report.i2t), ("t2i", report.t2i))
    ]
    lines.append(f"RSum={report.rsum:.1f}")
    return "\n".join(lines)


def cmd_eval(args):
    model, grammar = _load_model(args.checkpoint)
    data = _load_data(args.data, grammar)
    print(summary_text(run_eval(model, data, args.out)))
    return EXIT_OK


def cmd_compare(args):
    model, grammar = _load_model(args.checkpoint)
    data = _load_data(args.data, grammar)
    vocab, lexicon = grammar.vocabulary(), load_lexicon()
    graphs = {c.ids: parse_scene_graph(c, lexicon) for im in data for c in im.captions}
    os.makedirs(args.out_dir, exist_ok=True)
    for strategy in GapStrategy:
        hist = difficulty_gap(model, data, strategy, batch_size=args.batch_size,
                              rng=np.random.default_rng(args.seed), vocab=vocab, graphs=graphs,
                              K=args.K, L=args.L, tau=args.tau)
        path = os.path.join(args.out_dir, f"gaps_{strategy.value}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("bin_left", "count"))
            for left, count in zip(hist.bin_left, hist.counts):
                w.writerow((f"{left:.2f}", int(count)))
        print(f"{strategy.value:>9}  n={len(hist.values)}  mean_gap={hist.mean:.4f}  "
              f"frac>0={hist.fraction_above(0.0):.3f}  -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="tagsdc", description="Image-text matching with generated hard negatives.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("datagen", help="write a toy dataset as JSONL")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grammar", default="toy", choices=sorted(GRAMMARS))
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train from a key=value config; --key value overrides")
    s.add_argument("--config", default=None)

    def model_data(s):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)

    s = sub.add_parser("generate-negatives", help="write generated negatives as JSONL")
    model_data(s)
    s.add_argument("--out", required=True)
    s.add_argument("--K", type=int, default=3)
    s.add_argument("--L", type=int, default=4)
    s.add_argument("--tau", type=float, default=1.0)
    s.add_argument("--mask-ratio", type=float, default=0.15)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="retrieval recall report")
    model_data(s)
    s.add_argument("--out", default=None, help="CSV report path")

    s = sub.add_parser("compare-strategies", help="difficulty-gap histograms per negative strategy")
    model_data(s)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--K", type=int, default=3)
    s.add_argument("--L", type=int, default=4)
    s.add_argument("--tau", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required; see --help")
        if extra and args.command != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args, extra)
        return {
            "datagen": cmd_datagen,
            "generate-negatives": cmd_generate,
            "eval": cmd_eval,
            "compare-strategies": cmd_compare,
        }[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
