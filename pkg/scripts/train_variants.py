"""MLM loss curves for every attention variant on one synthetic corpus.

Writes a TSV of (variant, step, lr, loss) rows to stdout, then a summary of
initial vs final loss per variant on stderr.

    python scripts/train_variants.py --steps 500 > curves.tsv
"""
import argparse
import math
import sys

import numpy as np

from convattn.attention import VARIANTS
from convattn.model import EncoderConfig
from convattn.synthetic import KINDS, SyntheticTaskSpec, generate
from convattn.training import RunConfig, TrainConfig, build_vocab, initial_loss, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=sorted(VARIANTS), choices=sorted(VARIANTS))
    ap.add_argument("--kind", default="copy-prev", choices=KINDS)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--absolute-positions", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    lines = generate(SyntheticTaskSpec(args.kind, count=2000, seed=2))
    ln_v = math.log(len(build_vocab(lines, 30004)))
    print("variant\tstep\tlr\tloss")
    summary = []
    for variant in args.variants:
        run = RunConfig(model=EncoderConfig(attention=VARIANTS[variant],
                                            use_absolute_positions=args.absolute_positions),
                        train=TrainConfig(steps=args.steps, warmup_steps=args.steps // 10, log_every=10,
                                          seed=args.seed))
        init = initial_loss(run, lines)
        res = train(run, lines=lines)
        for step, lr, loss in res.losses:
            print(f"{variant}\t{step}\t{lr!r}\t{loss!r}", flush=True)
        final = float(np.mean([loss for _, _, loss in res.losses[-5:]]))
        summary.append(f"{variant:22s} init {init:.3f} (ln V {ln_v:.3f})  final {final:.3f}  "
                       f"drop {1 - final / res.losses[0][2]:.0%}")
    print("\n".join(summary), file=sys.stderr)


if __name__ == "__main__":
    main()
