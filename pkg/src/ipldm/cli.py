"""Command-line entry point: ``ipldm {phantom,train,generate,evaluate,ablation}``.

Exit codes: 0 success, 1 internal error, 2 usage or domain error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import numerics as nx
from .config import PRESETS, STAGES, RunConfig, apply_preset, load_config, paper_scale
from .errors import CheckpointError, DimensionError, DomainError, SamplingError, StageOrderError

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2
# errors a user can fix by changing inputs, not code
USER_ERRORS = (DomainError, DimensionError, SamplingError, StageOrderError, CheckpointError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _ages(text: str) -> list[float]:
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad age list {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ipldm", description="Identity-preserving longitudinal latent diffusion on phantoms")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="plain-text key=value config file")
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--paper-scale", action="store_true",
                        help="published batch sizes / steps / learning rates (not desk feasible)")

    sp = sub.add_parser("phantom", help="render a phantom cohort as PGM + manifest")
    common(sp)
    sp.add_argument("--subjects", type=int, default=None)
    sp.add_argument("--heldout", action="store_true", help="render the held-out subjects instead")

    sp = sub.add_parser("train", help="train one stage (or all) into <out>/checkpoint.ipldm")
    common(sp)
    sp.add_argument("--stage", choices=STAGES + ("all",), default="all")
    sp.add_argument("--preset", choices=sorted(PRESETS))

    sp = sub.add_parser("generate", help="age-transform a source image")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--age", type=float)
    sp.add_argument("--ages", type=_ages, help="comma-separated sweep, e.g. 45,55,65,75,85,95")

    sp = sub.add_parser("evaluate", help="score a checkpoint on a held-out manifest")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--evaluator", help="checkpoint whose identity projector scores ARI")

    sp = sub.add_parser("ablation", help="train and evaluate presets A-D")
    common(sp)
    sp.add_argument("--presets", default="ABCD")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "preset", None):
        cfg = apply_preset(cfg, args.preset)
    if args.paper_scale:
        cfg = paper_scale(cfg)
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.out is not None:
        upd["out"] = args.out
    return cfg.replace(**upd) if upd else cfg


def run(args) -> int:
    from . import pipeline as pl

    cfg = resolve_config(args)
    if args.command == "phantom":
        if args.subjects is not None:
            cfg = cfg.replace(n_heldout=args.subjects) if args.heldout else cfg.replace(n_subjects=args.subjects)
        cohort = pl.make_cohort(cfg)
        recs = cohort.heldout if args.heldout else cohort.train
        path = pl.write_manifest(recs, cfg.out)
        print(f"wrote {len(recs)} phantoms and {path}")
    elif args.command == "train":
        if args.stage == "all":
            pl.run_all(cfg)
        else:
            pl.train(cfg, args.stage)
        print(f"checkpoint: {Path(cfg.out) / pl.CHECKPOINT_NAME}")
    elif args.command == "generate":
        if (args.age is None) == (args.ages is None):
            raise DomainError("give exactly one of --age or --ages")
        ages = [args.age] if args.age is not None else args.ages
        seed = cfg.sample_seed if args.seed is None else args.seed
        for p in pl.generate(args.checkpoint, args.source, ages, seed, cfg.out):
            print(p)
    elif args.command == "evaluate":
        report = pl.evaluate(args.checkpoint, args.manifest, cfg.out, args.evaluator)
        print(json.dumps(report.summary, sort_keys=True, default=str))
    elif args.command == "ablation":
        presets = tuple(args.presets.upper())
        bad = sorted(set(presets) - set(PRESETS))
        if bad:
            raise DomainError(f"unknown presets {bad}")
        rows = pl.ablation(cfg, cfg.out, presets)
        for r in rows:
            print(",".join(str(r[c]) for c in pl.ABLATION_COLUMNS))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    nx.configure_determinism()
    try:
        return run(args)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - last-resort reporting
        logging.getLogger("ipldm").exception("internal error")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
