"""``convattn`` command line: train, eval, gen-synthetic, export-kernels, export-attention."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .model import load_checkpoint
from .synthetic import KINDS, SyntheticTaskSpec, generate, write_corpus
from .training import load_run_config, read_corpus, train


class UsageError(Exception):
    """Bad invocation detected after argument parsing; exits with status 2."""


def _common(parser: argparse.ArgumentParser, config_required: bool = False, out_required: bool = False):
    parser.add_argument("--seed", type=int, default=None, help="override the random seed")
    parser.add_argument("--config", default=None, required=config_required, help="run-config JSON file")
    parser.add_argument("--out", default=None, required=out_required, help="output file or directory")


def _row_range(text: str) -> slice:
    try:
        lo, _, hi = text.partition(":")
        return slice(int(lo) if lo else None, int(hi) if hi else None)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 0:16, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="MLM pre-training from a run config")
    _common(p, config_required=True, out_required=True)
    p.add_argument("--corpus", default=None, help="override the corpus path in the config")
    p.add_argument("--steps", type=int, default=None, help="override the number of steps")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("eval", help="masked-token accuracy and loss of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus-format dataset")
    p.add_argument("--mask-prob", type=float, default=0.15)

    p = sub.add_parser("gen-synthetic", help="write a synthetic position-probe corpus")
    _common(p)
    p.add_argument("--kind", choices=KINDS, default="copy-prev")
    p.add_argument("--n", type=int, default=5000, help="number of lines")
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--mapping-seed", type=int, default=0)

    p = sub.add_parser("export-kernels", help="write learned convolution kernels as CSV")
    _common(p, out_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--kind", choices=("fixed", "depthwise"), default="fixed")
    p.add_argument("--rows", type=_row_range, default=None, help="head/channel range, e.g. 0:32")
    p.add_argument("--sort-by-argmax", action="store_true")

    p = sub.add_parser("export-attention", help="write one head's attention map as CSV")
    _common(p, out_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--with-specials", action="store_true", help="wrap the sentence in [CLS] ... [SEP]")
    return parser


def _require_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _cmd_train(args) -> None:
    _require_file(args.config, "config file")
    run = load_run_config(args.config)
    tc = run.train
    if args.corpus:
        tc = dataclasses.replace(tc, corpus=args.corpus)
    if args.steps is not None:
        tc = dataclasses.replace(tc, steps=args.steps, warmup_steps=min(tc.warmup_steps, args.steps))
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    if not tc.corpus:
        raise UsageError("no corpus: set train.corpus in the config or pass --corpus")
    corpus = Path(tc.corpus)
    if not corpus.is_absolute() and not corpus.exists():
        corpus = Path(args.config).parent / corpus
    _require_file(str(corpus), "corpus")
    run = dataclasses.replace(run, train=dataclasses.replace(tc, corpus=str(corpus)))
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = train(run, out_dir=args.out, progress=args.verbose)
    last = result.losses[-1] if result.losses else None
    print(f"wrote {Path(args.out) / 'checkpoint.bin'}"
          + (f" (step {last[0]}, loss {last[2]:.4f})" if last else ""))


def _cmd_eval(args) -> None:
    from .inspection import evaluate

    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "dataset")
    res = evaluate(load_checkpoint(args.checkpoint), read_corpus(args.data),
                   seed=0 if args.seed is None else args.seed, mask_prob=args.mask_prob)
    text = f"accuracy\t{res.accuracy!r}\nloss\t{res.loss!r}\npositions\t{res.positions}\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _cmd_gen(args) -> None:
    spec = SyntheticTaskSpec(kind=args.kind, vocab_size=args.vocab_size, length=args.length,
                             count=args.n, seed=0 if args.seed is None else args.seed,
                             mapping_seed=args.mapping_seed)
    if args.config:
        _require_file(args.config, "config file")
        fields = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(fields) - {f.name for f in dataclasses.fields(SyntheticTaskSpec)}
        if unknown:
            raise UsageError(f"unknown synthetic task keys: {sorted(unknown)}")
        spec = dataclasses.replace(spec, **fields)
    lines = generate(spec)
    if args.out:
        write_corpus(args.out, lines)
    else:
        sys.stdout.write("".join(line + "\n" for line in lines))


def _cmd_export_kernels(args) -> None:
    from .inspection import export_kernel_weights

    _require_file(args.checkpoint, "checkpoint")
    export_kernel_weights(load_checkpoint(args.checkpoint), args.layer, args.out, kind=args.kind,
                          rows=args.rows, sort_argmax=args.sort_by_argmax)


def _cmd_export_attention(args) -> None:
    from .inspection import export_attention_map

    _require_file(args.checkpoint, "checkpoint")
    export_attention_map(load_checkpoint(args.checkpoint), args.sentence, args.layer, args.head,
                         args.out, with_specials=args.with_specials)


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gen-synthetic": _cmd_gen,
    "export-kernels": _cmd_export_kernels,
    "export-attention": _cmd_export_attention,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"convattn {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, OSError, KeyError) as exc:
        print(f"convattn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
