"""Train the full configuration at desk scale and print the headline checks.

    python3 scripts/desk_run.py runs/desk
"""
import argparse
import json
import logging
import time

import numpy as np
import torch

from ipldm import metrics as M
from ipldm import pipeline as pl
from ipldm.checkpoint import load_checkpoint
from ipldm.config import RunConfig, load_config
from ipldm.phantoms import stack_images

SWEEP_AGES = [45, 55, 65, 75, 85, 95]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--config")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = (load_config(args.config) if args.config else RunConfig()).replace(out=args.out)
    cohort = pl.make_cohort(cfg)
    t0 = time.perf_counter()
    pl.run_all(cfg, cohort)
    bundle = pl.load_bundle(load_checkpoint(f"{args.out}/{pl.CHECKPOINT_NAME}"), cfg)

    ids = [r.subject_id for r in cohort.heldout]
    with torch.no_grad():
        emb = bundle.irl.embed(bundle.irl.grid(pl.encode_all(bundle.ae, stack_images(cohort.heldout))))
    report = pl.evaluate_records(cohort.heldout, pl.bundle_generator(bundle), bundle, cfg)
    report.write(f"{args.out}/eval")
    sweep = pl.age_sweep(bundle, cohort.heldout, SWEEP_AGES, cfg.sample_seed)
    losses = [r["loss"] for r in pl.read_loss_log(f"{args.out}/logs/unet.csv")]

    print(json.dumps({
        "retrieval": M.retrieval_accuracy(emb, ids),
        "intra_inter": M.intra_inter_distance(emb, ids),
        "summary": report.summary,
        "sweep_rho_mean": float(np.mean([M.age_trend(SWEEP_AGES, c) for c in sweep.values()])),
        "unet_loss_50_100": float(np.mean(losses[49:100])),
        "unet_loss_final_50": float(np.mean(losses[-50:])),
        "minutes": (time.perf_counter() - t0) / 60,
    }, indent=2, default=str))


if __name__ == "__main__":
    main()
