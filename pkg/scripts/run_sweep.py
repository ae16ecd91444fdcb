#!/usr/bin/env python3
"""Reproduce the weighting-coefficient and cluster-count sweeps on a
synthetic dataset.

Generates a flat-layout dataset if the target directory is empty, then runs
`vesselcouple sweep` over lambda1 {0.01, 0.05, 0.1, 0.5, 1.0} and cluster
counts {20, 25, 30}, writing one CSV per sweep.
"""

import argparse
import subprocess
import sys
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="data/synth", help="dataset directory")
    ap.add_argument("--out", default="runs/sweeps", help="output directory")
    ap.add_argument("--n", type=int, default=25)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--max-epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not (data / "manifest.json").exists():
        subprocess.run([sys.executable, "-m", "vesselcouple.cli", "synth",
                        "--n", str(args.n), "--size", str(args.size),
                        "--out", str(data)], check=True)

    common = ["--data", str(data), "--max-epochs", str(args.max_epochs),
              "--patience", str(args.max_epochs), "--dtype", "float32",
              "--seed", str(args.seed)]
    sweeps = [("lambda1", "0.01,0.05,0.1,0.5,1.0"),
              ("lambda2", "0.01,0.05,0.1,0.5"),
              ("clusters", "20,25,30")]
    for param, values in sweeps:
        csv_path = out / f"sweep_{param}.csv"
        print(f"==> sweeping {param} over {values} -> {csv_path}")
        subprocess.run([sys.executable, "-m", "vesselcouple.cli", "sweep",
                        "--param", param, "--values", values,
                        "--out", str(csv_path)] + common, check=True)


if __name__ == "__main__":
    main()
