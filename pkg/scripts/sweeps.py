"""Sum rate and FLOPs against B, N or I for the learned policies and both baselines.

    python scripts/sweeps.py --axis I --values 6 8 10 12 --out results/sweeps
    python scripts/sweeps.py --axis B --values 2 3 4 --flops-only

Set CFNET_THREADS to run sweep points in parallel processes.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path

from cfnet import baselines, harness, policy


@dataclass
class SweepConfig:
    axis: str = "I"
    values: list[int] = field(default_factory=lambda: [6, 8, 10, 12])
    out: Path = Path("results/sweeps")
    n_train: int = 1000
    n_test: int = 200
    epochs: int = 10
    seed: int = 0
    flops_only: bool = False


def flops_table(sc: SweepConfig) -> list[dict]:
    """Closed-form complexity only, no training."""
    base = harness.ExperimentConfig.from_dict({}).system()
    rows = []
    for v in sc.values:
        s = base.replace(**{sc.axis: v})
        rows += [
            {sc.axis: v, "algorithm": "cmtssl", "flops": policy.PolicyNetworkSpec.centralized(s).flops()},
            {sc.axis: v, "algorithm": "dmtssl", "flops": policy.PolicyNetworkSpec.local(s).flops()},
            {sc.axis: v, "algorithm": "rsa_zfbf", "flops": baselines.flops_rsa_zfbf(s).total},
            {sc.axis: v, "algorithm": "gsa_zfbf", "flops": baselines.flops_gsa_zfbf(s).total},
        ]
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", choices=["B", "N", "I"], default="I")
    ap.add_argument("--values", type=int, nargs="+", default=[6, 8, 10, 12])
    ap.add_argument("--out", type=Path, default=SweepConfig.out)
    ap.add_argument("--n-train", type=int, default=SweepConfig.n_train)
    ap.add_argument("--n-test", type=int, default=SweepConfig.n_test)
    ap.add_argument("--epochs", type=int, default=SweepConfig.epochs)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--flops-only", action="store_true")
    sc = SweepConfig(**vars(ap.parse_args(argv)))
    if sc.flops_only:
        sc.out.mkdir(parents=True, exist_ok=True)
        path = sc.out / f"flops-{sc.axis}.csv"
        harness.write_csv(path, flops_table(sc), [sc.axis, "algorithm", "flops"])
        print(f"wrote {path}")
        return
    cfg = harness.ExperimentConfig.from_dict({
        "seed": sc.seed, "output_dir": str(sc.out),
        "sweep": {"axis": sc.axis, "values": sc.values, "n_train": sc.n_train, "n_test": sc.n_test,
                  "epochs": sc.epochs}})
    print(f"wrote {harness.sweep_run(cfg)}")


if __name__ == "__main__":
    main()
