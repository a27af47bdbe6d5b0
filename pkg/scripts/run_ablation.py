"""Run one ablation preset on MovieLens-100k and print the comparison table.

Presets: loss_target, trajectory, sampler, s, delta. Every variant shares
the base config and seed, so only the named factor changes.
"""

import argparse
import sys

from flowrec.cli import ABLATION_PRESETS, main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("preset", choices=sorted(ABLATION_PRESETS))
    parser.add_argument("--config", default="configs/ml100k_ablation.cfg")
    parser.add_argument("--data", default="data/ml-100k/u.data")
    parser.add_argument("--out", default=None)
    parser.add_argument("--values", help="comma-separated override of the preset grid")
    args = parser.parse_args()
    argv = ["-v", "ablate", "--preset", args.preset, "--config", args.config,
            "--set", f"data.path={args.data}", "--out", args.out or f"runs/ablation-{args.preset}"]
    if args.values:
        argv += ["--values", args.values]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
