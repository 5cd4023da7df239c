"""Add one SBS to a trained DMTSSL deployment and compare nearest-model transfer with retraining.

    python scripts/datl_study.py --seeds 0 1 2 --epochs 20 --out results/datl
"""
from __future__ import annotations

import argparse
import json
from dataclasses import dataclass, field
from pathlib import Path

from cfnet import harness


@dataclass
class DatlConfig:
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs: int = 20
    scheme: str = "S1"
    out: Path = Path("results/datl")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=DatlConfig.epochs)
    ap.add_argument("--scheme", default=DatlConfig.scheme)
    ap.add_argument("--out", type=Path, default=DatlConfig.out)
    dc = DatlConfig(**vars(ap.parse_args(argv)))
    dc.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in dc.seeds:
        cfg = harness.ExperimentConfig.from_dict({"seed": seed, "train": {"epochs": dc.epochs, "scheme": dc.scheme}})
        train, _, topo = harness.generate_data(cfg)
        models = harness.train_models(cfg, "dmtssl", train).models
        rep = harness.datl_study(cfg, models, topo, retrain=True)
        (dc.out / f"datl-s{seed}.json").write_text(json.dumps(rep, indent=2) + "\n")
        rows.append({"seed": seed, "b_star": rep["b_star"], "datl": rep["datl"]["mean_weighted_sum_rate"],
                     "retrained": rep["retrained"]["mean_weighted_sum_rate"], "ratio": rep["ratio"],
                     "loss_pct": rep["loss_pct"]})
        print(json.dumps(rows[-1]), flush=True)
    harness.write_csv(dc.out / "datl.csv", rows, list(rows[0]))


if __name__ == "__main__":
    main()
