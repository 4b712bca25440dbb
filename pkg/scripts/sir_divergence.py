"""Proposal width over many SIR-sampled rounds for a small and a large K.

The fixture is x = theta + N(0, noise^2) with a N(0, 1) prior, trained on the
latest round only, so any SIR bias feeds back into the next proposal.

Usage: python3 scripts/sir_divergence.py [--rounds 50] [--noise 0.1] [--epsilon 1e-6]
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from tsnpe.density import TrainConfig
from tsnpe.engine import RunConfig, read_dataset, run
from tsnpe.tasks import TaskSpec
from tsnpe.tasks.priors import DiagGaussian
from tsnpe.tasks.simulators import Simulator


def make_task(noise_std: float) -> TaskSpec:
    class NoisyCopy(Simulator):
        name, theta_dim, x_dim, noise_dim = "noisy_copy", 1, 1, 1

        def noise(self, rng):
            return rng.standard_normal(1)

        def transform(self, theta, noise):
            return theta + noise_std * noise

    return TaskSpec("noisy_copy", 97, DiagGaussian([0.0], [1.0]), NoisyCopy(), np.array([0.5]),
                    np.array([0.5]), None)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=50)
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--epsilon", type=float, default=1e-6)
    ap.add_argument("--ks", default="16,1024")
    args = ap.parse_args()
    task = make_task(args.noise)
    m = max(10_000, int(np.ceil(10 / args.epsilon)))
    with tempfile.TemporaryDirectory() as tmp:
        for k in (int(v) for v in args.ks.split(",")):
            cfg = RunConfig(task=task.name, rounds=args.rounds, simulations=500, sampler="sir", k=k,
                            pooling="latest", components=1, epsilon=args.epsilon, m_threshold=m, metrics=(),
                            train=TrainConfig(batch_size=100), name=f"k{k}")
            recs = run(cfg, out=tmp, task=task)
            stds = [read_dataset(Path(tmp) / f"k{k}" / f"round_{r.round}" / "dataset.csv")[0].std() for r in recs]
            ess = np.concatenate([r.sampler.sir.ess for r in recs if r.sampler.sir is not None])
            print(f"K={k}: final proposal std {stds[-1]:.4f}; every 5th round "
                  + " ".join(f"{s:.3f}" for s in stds[::5]) + f"; ESS mean {ess.mean():.2f} min {ess.min():.2f}")


if __name__ == "__main__":
    main()
