"""Train the desk-scale MovieLens-100k model and compare with reference numbers."""

import argparse
import logging
import time

from flowrec.cli import train_run
from flowrec.config import RunConfig

REFERENCE_PCT = {"HR@5": 9.33, "HR@10": 15.49, "HR@20": 24.31,
                 "NDCG@5": 5.68, "NDCG@10": 7.66, "NDCG@20": 9.82}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/ml100k.cfg")
    parser.add_argument("--data", default="data/ml-100k/u.data")
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--seed", type=int)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    overrides = {"data.path": args.data, "out_dir": args.out}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = RunConfig.load(args.config).replace(**overrides)
    start = time.perf_counter()
    out, report = train_run(cfg)
    minutes = (time.perf_counter() - start) / 60

    print(f"metric\tours_pct\treference_pct")
    for name, value in report.rows():
        print(f"{name}\t{value:.2f}\t{REFERENCE_PCT[name]:.2f}")
    print(f"# {minutes:.1f} min, run directory {out}")


if __name__ == "__main__":
    main()
