"""Pretrain on the synthetic corpus, then compare linear probes.

A probe trains only an affine head on frozen graph vectors, so it measures
what the encoder learned without labels. The default is a short run; pass
--steps 500 --seeds 5 for the setting used by the acceptance tests
(about half an hour on one core).
"""
import argparse

import numpy as np

from stjema.experiments import desk_dataset, run_study

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=150)
parser.add_argument("--seeds", type=int, default=1)
parser.add_argument("--variants", default="full,no_temporal")
args = parser.parse_args()

dataset = desk_dataset()
print(f"{len(dataset)} subjects; pretraining {args.steps} steps per run")
result = run_study(range(args.seeds), variants=args.variants.split(","), steps=args.steps,
                   dataset=dataset, log=print)

print("\nprobe AUROC (mean over seeds)")
print(f"  untrained encoder  {result.mean('random'):.3f}")
for name in args.variants.split(","):
    losses = np.concatenate([r.losses()[None] for r in result.reports[name]]).mean(0)
    print(f"  {name:<17}  {result.mean(name):.3f}   loss {losses[:10].mean():.4f} -> {losses[-10:].mean():.4f}")
print(f"took {result.seconds:.0f}s")
