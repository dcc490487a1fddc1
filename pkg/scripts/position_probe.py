"""Train no-position, composite and fixed-kernel encoders on copy-prev and compare them.

Prints held-out masked accuracy per model and the argmax offset of every
learned fixed kernel; optionally writes kernels and one attention map per
model under --out.

    python scripts/position_probe.py --steps 3000 --out runs/probe
"""
import argparse
import time
from pathlib import Path

from convattn.attention import VARIANTS
from convattn.inspection import evaluate, export_attention_map, export_kernel_weights
from convattn.model import EncoderConfig
from convattn.synthetic import SyntheticTaskSpec, generate
from convattn.training import RunConfig, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=["none", "composite", "fixed"], choices=sorted(VARIANTS))
    ap.add_argument("--kind", default="copy-prev")
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    lines = generate(SyntheticTaskSpec(args.kind, vocab_size=50, length=16, count=5000, seed=1))
    held_out = generate(SyntheticTaskSpec(args.kind, vocab_size=50, length=16, count=500, seed=99))
    print("variant\tseconds\taccuracy\tloss\tkernel argmax offsets")
    for variant in args.variants:
        run = RunConfig(model=EncoderConfig(attention=VARIANTS[variant]),
                        train=TrainConfig(steps=args.steps, warmup_steps=args.steps // 10, peak_lr=args.lr,
                                          log_every=100, seed=args.seed))
        out = Path(args.out) / variant if args.out else None
        t0 = time.perf_counter()
        ckpt = train(run, out_dir=out, lines=lines).checkpoint
        secs = time.perf_counter() - t0
        res = evaluate(ckpt, held_out)
        peaks = ""
        if ckpt.config.attention.use_fixed_lightweight:
            k = ckpt.config.k
            peaks = " ".join(
                str((ckpt.params[f"layer{i}.attn.fixed_beta"].data.argmax(axis=1) - k).tolist())
                for i in range(ckpt.config.layers))
        print(f"{variant}\t{secs:.0f}\t{res.accuracy:.4f}\t{res.loss:.4f}\t{peaks}", flush=True)
        if out is not None:
            for i in range(ckpt.config.layers):
                if ckpt.config.attention.use_fixed_lightweight:
                    export_kernel_weights(ckpt, i, out / f"fixed_layer{i}.csv")
                if ckpt.config.attention.use_depthwise_bias:
                    export_kernel_weights(ckpt, i, out / f"depthwise_layer{i}.csv", kind="depthwise",
                                          sort_argmax=True)
            export_attention_map(ckpt, held_out[0], 0, 0, out / "attention_layer0_head0.csv")


if __name__ == "__main__":
    main()
