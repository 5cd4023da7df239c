"""Clean-test accuracy of NFL/EL-trained classifiers under symmetric label noise.

    python scripts/noise_tolerance.py --Z 5 --etas 0 0.2 0.4 0.6 --seeds 0 1 2
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path

from cfnet import harness, robustness


@dataclass
class NoiseConfig:
    Z: int = 5
    etas: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.4])
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs: int = 60
    out: Path = Path("results/noise")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--Z", type=int, default=5)
    ap.add_argument("--etas", type=float, nargs="+", default=[0.0, 0.2, 0.4])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=NoiseConfig.epochs)
    ap.add_argument("--out", type=Path, default=NoiseConfig.out)
    nc = NoiseConfig(**vars(ap.parse_args(argv)))
    nc.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in nc.seeds:
        for r in robustness.run_noise_tolerance_experiment(Z=nc.Z, etas=tuple(nc.etas), seed=seed,
                                                           epochs=nc.epochs):
            rows.append({"seed": seed, **r})
            print(f"seed {seed} {r['loss']:>3} eta={r['eta']:.2f} acc={r['clean_test_acc']:.3f} "
                  f"residual={r['identity_residual']:.4f}")
    harness.write_csv(nc.out / "noise.csv", rows, list(rows[0]))


if __name__ == "__main__":
    main()
