"""Scaled augmentation trend check at 32³.

Trains one WGAN-GP per seed on 80 phantom skulls, synthesizes 1000 samples,
trains a V-Net per subset size with a fixed step budget, and reports mean DSC
on the 20 held-out skulls.
"""

import argparse
import json
import logging
from dataclasses import replace

import torch

from cranio_synth.experiments import TrendConfig, trend_check


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--sizes", type=int, nargs="+", default=[50, 200, 1000])
    p.add_argument("--gan-epochs", type=int, help="WGAN-GP epoch budget")
    p.add_argument("--vnet-steps", type=int, help="optimiser steps per V-Net")
    p.add_argument("--out", help="optional JSON results file")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)

    cfg = TrendConfig(subset_sizes=tuple(args.sizes))
    if args.gan_epochs:
        cfg = replace(cfg, generator=replace(cfg.generator, epochs=args.gan_epochs))
    if args.vnet_steps:
        cfg = replace(cfg, vnet_steps=args.vnet_steps)
    res = trend_check(args.seeds, cfg)
    for seed, means in res.per_seed.items():
        print(f"seed {seed}: " + "  ".join(f"{n}={m:.3f}" for n, m in zip(res.sizes, means)))
    print("mean:   " + "  ".join(f"{n}={m:.3f}" for n, m in zip(res.sizes, res.means)))
    print(f"non-decreasing: {res.non_decreasing()}  gain: {res.gain():+.3f}  pass: {res.passed(cfg.min_gain)}")
    print(f"runtime: {res.seconds / 60:.1f} min")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"sizes": res.sizes, "per_seed": res.per_seed, "means": res.means, "seconds": res.seconds}, f, indent=2)


if __name__ == "__main__":
    main()
