"""Train and evaluate presets A-D, reusing shared stages, and print the table.

    python3 scripts/ablation.py runs/ablation
"""
import argparse
import logging

from ipldm import pipeline as pl
from ipldm.config import RunConfig, load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--config")
    ap.add_argument("--presets", default="ABCD")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config) if args.config else RunConfig()
    rows = pl.ablation(cfg, args.out, tuple(args.presets.upper()))
    print(",".join(pl.ABLATION_COLUMNS))
    for r in rows:
        print(",".join(str(r[c]) if isinstance(r[c], (int, str)) else f"{r[c]:.4f}" for c in pl.ABLATION_COLUMNS))


if __name__ == "__main__":
    main()
