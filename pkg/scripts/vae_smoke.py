"""VAE learnability smoke test at 16³: mean reconstruction Dice per seed."""

import argparse
import json
import logging
import time

import torch

from cranio_synth.experiments import SmokeConfig, vae_smoke


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--n-skulls", type=int, default=20)
    p.add_argument("--out", help="optional JSON results file")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    cfg = SmokeConfig(n_skulls=args.n_skulls, epochs=args.epochs)
    results = {}
    for seed in args.seeds:
        t0 = time.time()
        results[seed] = vae_smoke(seed, cfg)
        print(f"seed {seed}: dice {results[seed]:.3f} ({time.time() - t0:.0f} s)")
    hits = sum(d >= cfg.threshold for d in results.values())
    print(f"{hits}/{len(results)} seeds reach {cfg.threshold}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"config": vars(args), "dice": results}, f, indent=2)


if __name__ == "__main__":
    main()
