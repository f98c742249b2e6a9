"""Sanity numbers for a world config before running experiments.

    python3 scripts/check_world.py [configs/world_default.toml]

Reports mixture weights against the nearest-mode fractions of generator
output (rare modes should come out underrepresented), and the Frechet
distance between two independent real feature samples as a noise floor.
"""

import argparse

import numpy as np

from raregen.harness.metrics import frechet_distance
from raregen.world import ToyWorld, default_world_config, extract, generate, load_world_config, sample_real


def mode_fractions(world: ToyWorld, n: int, seed: int) -> np.ndarray:
    z = world.sample_latents(n, seed)
    x = generate(world.generator, z)
    d2 = ((x[:, None, :] - world.mixture.means[None]) ** 2).sum(-1)
    return np.bincount(d2.argmin(1), minlength=len(world.mixture.weights)) / n


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?")
    ap.add_argument("--draws", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    world = ToyWorld.from_config(load_world_config(args.config) if args.config else default_world_config())
    fractions = mode_fractions(world, args.draws, args.seed)
    for k, (w, f) in enumerate(zip(world.mixture.weights, fractions)):
        print(f"component {k}: weight {w:.3f}  generated {f:.3f}")
    a = extract(world.extractor, sample_real(world.mixture, 5000, np.random.default_rng([args.seed, 1])))
    b = extract(world.extractor, sample_real(world.mixture, 5000, np.random.default_rng([args.seed, 2])))
    print(f"Frechet noise floor (5000 vs 5000): {frechet_distance(a, b):.4f}")
