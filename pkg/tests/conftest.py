"""Shared fixtures: the desk-scale ablation run (trained once per session) and the
acceptance result lines printed in the terminal summary."""
import json
import time
from pathlib import Path

import pytest
import torch

from ipldm import metrics as M
from ipldm import pipeline as pl
from ipldm.checkpoint import load_checkpoint
from ipldm.config import RunConfig
from ipldm.phantoms import stack_images

SWEEP_AGES = [45, 55, 65, 75, 85, 95]
ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
    return passed


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Train presets D, C, B, A at desk scale and collect every measurement the
    acceptance checks need.  D doubles as the full desk run."""
    root = tmp_path_factory.mktemp("desk")
    base = RunConfig(out=str(root / "D"))
    t0 = time.perf_counter()
    rows = pl.ablation(base, root)
    ablation_seconds = time.perf_counter() - t0

    cfg = base
    cohort = pl.make_cohort(cfg)
    bundle = pl.load_bundle(load_checkpoint(root / "D" / pl.CHECKPOINT_NAME), cfg)
    held = stack_images(cohort.heldout)
    ids = [r.subject_id for r in cohort.heldout]
    with torch.no_grad():
        emb = bundle.irl.embed(bundle.irl.grid(pl.encode_all(bundle.ae, held)))

    t0 = time.perf_counter()
    sweep = pl.age_sweep(bundle, cohort.heldout, SWEEP_AGES, seed=cfg.sample_seed)
    sweep_seconds = time.perf_counter() - t0

    timings = json.loads((root / "D" / "timings.json").read_text())
    return {
        "root": root,
        "rows": {r["preset"]: r for r in rows},
        "report": json.loads((root / "D" / "eval" / "report.json").read_text()),
        "retrieval": M.retrieval_accuracy(emb, ids),
        "intra_inter": M.intra_inter_distance(emb, ids),
        "sweep": sweep,
        "rho": {s: M.age_trend(SWEEP_AGES, c) for s, c in sweep.items()},
        "unet_log": pl.read_loss_log(root / "D" / "logs" / "unet.csv"),
        "timings": timings,
        "desk_seconds": sum(timings.values()) + sweep_seconds,
        "ablation_seconds": ablation_seconds,
    }


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
