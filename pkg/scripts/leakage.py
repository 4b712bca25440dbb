"""Per-round posterior mass outside the prior support on toy1d, TSNPE vs APT.

Usage: python3 scripts/leakage.py [--rounds 10] [--apt-rounds 20] [--seed 0]
"""

import argparse

from tsnpe.density import TrainConfig
from tsnpe.engine import RunConfig, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=10)
    ap.add_argument("--apt-rounds", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    common = dict(task="toy1d", simulations=500, seed=args.seed, train=TrainConfig(batch_size=100),
                  metric_samples=100_000)
    for method, rounds in (("tsnpe", args.rounds), ("apt", args.apt_rounds)):
        recs = run(RunConfig(method=method, rounds=rounds, **common))
        print(method, " ".join(f"{r.metrics['leakage_fraction']:.4f}" for r in recs))


if __name__ == "__main__":
    main()
