"""Staged training, generation, evaluation and the ablation sweep.

A run directory holds ``checkpoint.ipldm`` (all completed stages), one loss
log per stage under ``logs/`` and wall-clock timings in ``timings.json``.
The control stage stores its fine-tuned base decoder under ``joint.*`` so the
pretrained ``unet.*`` weights stay reusable by other ablation presets.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .autoenc import AEConfig, AutoEncoder, ae_train_step, calibrate_latent_scale, reconstruction_l1
from .checkpoint import Checkpoint, file_hash, load_checkpoint, save_checkpoint
from .conditioning import AgeEncoder, IdentityNet, IRLConfig, irl_train_step
from .config import (PRESETS, STAGE_DEPS, STAGES, RunConfig, apply_preset, dump_config,
                     from_dict)
from .control import ControlBranch, ModelBundle, init_control, joint_train_step, transform_batch
from .diffusion import DenoiserConfig, NoiseSchedule, SourceFusion, UNet, make_schedule, pretrain_step
from .errors import CheckpointError, DomainError, StageOrderError
from .imageio import read_image, write_pgm
from .metrics import EvalReport, identity_ari, summarize
from .phantoms import (PairSampler, PhantomRecord, TripletSampler, generate_dataset,
                       get_profile, stack_images, ventricle_pixel_count)

log = logging.getLogger("ipldm")

CHECKPOINT_NAME = "checkpoint.ipldm"
EVAL_BATCH = 64


# ---------------------------------------------------------------------------
# data & seeding
# ---------------------------------------------------------------------------

@dataclass
class Cohort:
    train: list[PhantomRecord]
    heldout: list[PhantomRecord]


def make_cohort(cfg: RunConfig) -> Cohort:
    rng = (cfg.scans_min, cfg.scans_max)
    train = generate_dataset(cfg.n_subjects, rng, cfg.profile, cfg.seed, cfg.resolution)
    heldout = generate_dataset(cfg.n_heldout, rng, cfg.profile, cfg.seed, cfg.resolution,
                               first_subject_id=cfg.n_subjects)
    return Cohort(train, heldout)


def stage_seed(cfg: RunConfig, stage: str) -> int:
    ss = np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, cfg.seed >> 32, STAGES.index(stage), 0x57A6E])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def stage_rngs(cfg: RunConfig, stage: str) -> tuple[torch.Generator, np.random.Generator]:
    """Seed torch's default RNG (for weight init) and return fresh noise/sampling streams."""
    s = stage_seed(cfg, stage)
    torch.manual_seed(s)
    return torch.Generator().manual_seed(s + 1), np.random.default_rng(s + 2)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def ae_config(cfg: RunConfig) -> AEConfig:
    return AEConfig(latent_channels=cfg.latent_channels, downsample=cfg.downsample,
                    widths=cfg.ae_widths, groups=4, edge_weight=cfg.edge_weight)


def irl_config(cfg: RunConfig) -> IRLConfig:
    return IRLConfig(latent_channels=cfg.latent_channels, latent_size=cfg.latent_size,
                     id_channels=cfg.id_channels, embed_dim=cfg.embed_dim, use_projector=cfg.ip)


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    s = cfg.latent_size
    return DenoiserConfig(latent_channels=cfg.latent_channels, latent_size=s,
                          base_channels=cfg.base_channels, attention_resolutions=(s, s // 2),
                          hidden_dim=cfg.hidden_dim)


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    if cfg.beta_start > 0:
        return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    return make_schedule(cfg.T)


def _load(module: torch.nn.Module, ck: Checkpoint, prefix: str) -> torch.nn.Module:
    state = ck.subset(prefix)
    if not state:
        raise CheckpointError(f"checkpoint has no '{prefix}.*' tensors")
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"'{prefix}' tensors do not fit the configured model: {e}") from None
    return module


def _store(ck: Checkpoint, module: torch.nn.Module, prefix: str) -> None:
    ck.drop({prefix})
    ck.tensors.update(nx.named_tensors(module, prefix))


def _freeze(*modules):
    for m in modules:
        if m is not None:
            for p in m.parameters():
                p.requires_grad_(False)
            m.eval()


def load_ae(ck, cfg):
    return _load(AutoEncoder(ae_config(cfg)), ck, "ae")


def load_bundle(ck: Checkpoint, cfg: RunConfig | None = None, require_control: bool = True) -> ModelBundle:
    cfg = cfg or from_dict(ck.config)
    missing = [s for s in STAGES if not ck.has(s)]
    if require_control and missing:
        raise CheckpointError(f"incomplete checkpoint: missing stages {missing}")
    ae = load_ae(ck, cfg)
    age = _load(AgeEncoder(cfg.hidden_dim, profile=cfg.profile), ck, "age")
    unet = _load(UNet(denoiser_config(cfg)), ck, "unet")
    irl = _load(IdentityNet(irl_config(cfg)), ck, "irl") if ck.has("irl") else None
    fusion, ctrl = SourceFusion(cfg.latent_channels), None
    if ck.has("control"):
        _load(unet.decoder, ck, "joint.decoder")
        _load(fusion, ck, "fuse")
        if cfg.cn:
            ctrl = _load(ControlBranch(unet, cfg.id_channels), ck, "ctrl")
    bundle = ModelBundle(ae, age, unet, fusion, schedule_for(cfg), irl, ctrl)
    _freeze(*bundle.modules().values())
    return bundle


# ---------------------------------------------------------------------------
# loss logs
# ---------------------------------------------------------------------------

class LossLog:
    def __init__(self, path: Path, every: int = 1):
        self.path, self.every = path, every
        self.rows: list[dict] = []

    def add(self, step: int, terms: dict | float):
        if isinstance(terms, float):
            terms = {"loss": terms}
        self.rows.append({"step": step, **terms})

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        keys = list(self.rows[0]) if self.rows else ["step", "loss"]
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.rows[self.every - 1::self.every] if self.every > 1 else self.rows:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in keys[1:]])


def read_loss_log(path) -> list[dict]:
    with open(path) as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _batches(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return rng.integers(0, n, size=batch)


@torch.no_grad()
def encode_all(ae: AutoEncoder, images: torch.Tensor) -> torch.Tensor:
    return torch.cat([ae.encode(images[i:i + EVAL_BATCH]) for i in range(0, len(images), EVAL_BATCH)])


def train_ae_stage(cfg: RunConfig, cohort: Cohort, ck: Checkpoint, lg: LossLog) -> None:
    _, rng = stage_rngs(cfg, "ae")
    ae = AutoEncoder(ae_config(cfg))
    opt = nx.Adam(ae.parameters(), cfg.ae_lr)
    train = stack_images(cohort.train)
    held = stack_images(cohort.heldout)
    curve = []
    every = max(1, cfg.ae_steps // 4)
    for step in range(1, cfg.ae_steps + 1):
        terms = ae_train_step(ae, train[_batches(rng, len(train), cfg.ae_batch)], opt, cfg.edge_weight)
        lg.add(step, terms)
        if step % every == 0 or step == cfg.ae_steps:
            curve.append([step, reconstruction_l1(ae, held)])
    scale = calibrate_latent_scale(ae, train)
    ck.meta["ae"] = {"heldout_l1": curve, "latent_scale": scale}
    _store(ck, ae, "ae")


def cosine_lr(base: float, step: int, total: int, floor: float = 0.1) -> float:
    """Cosine decay from ``base`` at step 1 to ``floor * base`` at ``total``."""
    frac = (step - 1) / max(total - 1, 1)
    return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def train_irl_stage(cfg: RunConfig, cohort: Cohort, ck: Checkpoint, lg: LossLog) -> None:
    _, rng = stage_rngs(cfg, "irl")
    ae = load_ae(ck, cfg)
    _freeze(ae)
    net = IdentityNet(irl_config(cfg))
    opt = nx.Adam(net.parameters(), cfg.irl_lr)
    z = encode_all(ae, stack_images(cohort.train))
    sampler = TripletSampler(cohort.train, cfg.profile)
    for step in range(1, cfg.irl_steps + 1):
        opt.state.lr = cosine_lr(cfg.irl_lr, step, cfg.irl_steps)
        idx = np.array([sampler.sample_indices(rng) for _ in range(cfg.irl_batch)])
        terms = irl_train_step(net, (z[idx[:, 0]], z[idx[:, 1]], z[idx[:, 2]]), opt,
                               margin=cfg.margin, gamma=cfg.gamma, identity_loss_on=cfg.il)
        lg.add(step, terms)
    ck.meta["irl"] = {"identity_loss": cfg.il, "projector": cfg.ip}
    _store(ck, net, "irl")


def train_unet_stage(cfg: RunConfig, cohort: Cohort, ck: Checkpoint, lg: LossLog) -> None:
    gen, rng = stage_rngs(cfg, "unet")
    ae = load_ae(ck, cfg)
    _freeze(ae)
    age = AgeEncoder(cfg.hidden_dim, profile=cfg.profile)
    unet = UNet(denoiser_config(cfg))
    sched = schedule_for(cfg)
    opt = nx.Adam(list(unet.parameters()) + list(age.parameters()), cfg.unet_lr)
    z = encode_all(ae, stack_images(cohort.train))
    ages = torch.tensor([r.age for r in cohort.train], dtype=nx.DTYPE)
    for step in range(1, cfg.unet_steps + 1):
        idx = torch.from_numpy(_batches(rng, len(z), cfg.unet_batch))
        lg.add(step, pretrain_step(unet, age, z[idx], ages[idx], sched, opt, gen))
    ck.meta["schedule"] = {"T": sched.T, "beta_start": float(sched.beta[0]),
                           "beta_end": float(sched.beta[-1]),
                           "alpha_bar_T": float(sched.alpha_bar[-1])}
    _store(ck, age, "age")
    _store(ck, unet, "unet")


def train_control_stage(cfg: RunConfig, cohort: Cohort, ck: Checkpoint, lg: LossLog) -> None:
    gen, rng = stage_rngs(cfg, "control")
    bundle = load_bundle(ck, cfg, require_control=False)
    bundle.fusion = SourceFusion(cfg.latent_channels)
    for p in list(bundle.unet.decoder.parameters()):
        p.requires_grad_(True)
    bundle.unet.decoder.train()
    bundle.ctrl = init_control(bundle.unet, cfg.id_channels) if cfg.cn else None
    if bundle.ctrl is not None:
        for p in bundle.ctrl.parameters():
            p.requires_grad_(True)
    opt = nx.Adam(bundle.joint_parameters(), cfg.control_lr)
    z = encode_all(bundle.ae, stack_images(cohort.train))
    ages = torch.tensor([r.age for r in cohort.train], dtype=nx.DTYPE)
    with torch.no_grad():
        z_id = bundle.irl.grid(z) if bundle.ctrl is not None else None
    sampler = PairSampler(cohort.train)
    for step in range(1, cfg.control_steps + 1):
        pairs = torch.tensor([sampler.sample_indices(rng) for _ in range(cfg.control_batch)])
        a, b = pairs[:, 0], pairs[:, 1]
        loss = joint_train_step(bundle, z[a], z[b], ages[b], bundle.schedule, opt, gen,
                                z_id=None if z_id is None else z_id[a])
        lg.add(step, loss)
    ck.drop({"joint", "fuse", "ctrl"})
    ck.tensors.update(nx.named_tensors(bundle.unet.decoder, "joint.decoder"))
    _store(ck, bundle.fusion, "fuse")
    if bundle.ctrl is not None:
        _store(ck, bundle.ctrl, "ctrl")


STAGE_FNS = {"ae": train_ae_stage, "irl": train_irl_stage, "unet": train_unet_stage,
             "control": train_control_stage}
STAGE_PREFIXES = {"ae": {"ae"}, "irl": {"irl"}, "unet": {"unet", "age"},
                  "control": {"joint", "fuse", "ctrl"}}


def _downstream(stage: str) -> list[str]:
    return [s for s in STAGES if stage in STAGE_DEPS[s]]


def _empty_checkpoint(cfg: RunConfig) -> Checkpoint:
    conf = cfg.to_dict()
    conf.pop("out")  # where a run lives is not part of the model
    return Checkpoint(conf)


def open_run(cfg: RunConfig) -> Checkpoint:
    """Load the run's checkpoint, refusing one trained under an incompatible config."""
    path = Path(cfg.out) / CHECKPOINT_NAME
    if not path.exists():
        return _empty_checkpoint(cfg)
    ck = load_checkpoint(path)
    for stage, h in ck.stages.items():
        if h != cfg.stage_hash(stage):
            raise CheckpointError(f"checkpoint stage '{stage}' was trained under a different config "
                                  f"(hash {h} != {cfg.stage_hash(stage)}); use a fresh --out")
    new = _empty_checkpoint(cfg)
    new.stages, new.meta, new.tensors = ck.stages, ck.meta, ck.tensors
    return new


def _adopt(ck: Checkpoint, donor: Checkpoint, stage: str) -> None:
    ck.drop(STAGE_PREFIXES[stage])
    for k, v in donor.tensors.items():
        if k.split(".", 1)[0] in STAGE_PREFIXES[stage]:
            ck.tensors[k] = v.clone()
    for key in {"ae": ["ae"], "irl": ["irl"], "unet": ["schedule"], "control": []}[stage]:
        if key in donor.meta:
            ck.meta[key] = donor.meta[key]
    ck.stages[stage] = donor.stages[stage]


def train(cfg: RunConfig, stage: str, cohort: Cohort | None = None,
          donors: list[Path] | None = None) -> Checkpoint:
    """Run one stage and write the updated checkpoint plus its loss log.

    ``donors`` are run directories whose identically-configured stages may be
    copied instead of retrained (used by the ablation sweep; the result is
    identical because every stage draws from its own seed).
    """
    if stage not in STAGES:
        raise DomainError(f"unknown stage {stage!r}; choose from {STAGES}")
    nx.configure_determinism()
    out = Path(cfg.out)
    ck = open_run(cfg)
    missing = [d for d in STAGE_DEPS[stage] if not ck.has(d)]
    if missing:
        raise StageOrderError(f"stage '{stage}' needs {missing} trained first")
    h = cfg.stage_hash(stage)
    for d in _downstream(stage):  # retraining invalidates everything built on top
        ck.stages.pop(d, None)
        ck.drop(STAGE_PREFIXES[d])
    log_path = out / "logs" / f"{stage}.csv"
    for donor_dir in donors or []:
        dp = Path(donor_dir) / CHECKPOINT_NAME
        if not dp.exists():
            continue
        donor = load_checkpoint(dp)
        if donor.stages.get(stage) == h:
            _adopt(ck, donor, stage)
            src_log = Path(donor_dir) / "logs" / f"{stage}.csv"
            if src_log.exists():
                log_path.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src_log, log_path)
            save_checkpoint(ck, out / CHECKPOINT_NAME)
            log.info("stage %s: reused from %s", stage, donor_dir)
            return ck
    cohort = cohort or make_cohort(cfg)
    lg = LossLog(log_path, cfg.log_every)
    t0 = time.perf_counter()
    log.info("stage %s: training", stage)
    STAGE_FNS[stage](cfg, cohort, ck, lg)  # raises before anything is written on divergence
    ck.stages[stage] = h
    lg.write()
    save_checkpoint(ck, out / CHECKPOINT_NAME)
    _record_timing(out, stage, time.perf_counter() - t0)
    log.info("stage %s: done in %.1fs", stage, time.perf_counter() - t0)
    return ck


def _record_timing(out: Path, stage: str, seconds: float):
    p = out / "timings.json"
    t = json.loads(p.read_text()) if p.exists() else {}
    t[stage] = round(seconds, 2)
    p.write_text(json.dumps(t, indent=2, sort_keys=True) + "\n")


def run_all(cfg: RunConfig, cohort: Cohort | None = None, donors=None) -> Checkpoint:
    cohort = cohort or make_cohort(cfg)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "config.txt").write_text(dump_config(cfg))
    ck = None
    for stage in STAGES:
        ck = train(cfg, stage, cohort, donors)
    return ck


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate(checkpoint_path, source_path, ages: list[float], seed: int, out_dir) -> list[Path]:
    """Write one PGM plus JSON sidecar per target age; returns the image paths."""
    nx.configure_determinism()
    ck = load_checkpoint(checkpoint_path)
    cfg = from_dict({**ck.config, "out": str(out_dir)})
    bundle = load_bundle(ck, cfg)
    profile = get_profile(cfg.profile)
    for a in ages:
        if not (profile.age_min <= a <= profile.age_max) or math.isnan(a):
            raise DomainError(f"target age {a} outside [{profile.age_min}, {profile.age_max}]")
    try:
        src = read_image(source_path)
    except (OSError, ValueError) as e:
        raise DomainError(f"cannot read source image {source_path}: {e}") from None
    if src.shape[-1] != cfg.resolution or src.shape[-2] != cfg.resolution:
        raise DomainError(f"source is {tuple(src.shape[-2:])}, model expects {cfg.resolution}px")
    imgs = transform_batch(bundle, src[None].expand(len(ages), -1, -1, -1),
                           list(ages), [seed] * len(ages))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_hash = file_hash(checkpoint_path)
    stem = Path(source_path).stem
    paths = []
    for a, img in zip(ages, imgs):
        p = write_pgm(out / f"{stem}_age{a:g}.pgm", img)
        side = {"source": str(source_path), "target_age": a, "seed": seed,
                "checkpoint_sha256": ck_hash, "image": p.name}
        p.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def enumerate_pairs(records: list[PhantomRecord]) -> list[tuple[int, int]]:
    """All ordered intra-subject pairs with different ages (both directions)."""
    pairs = []
    for i, a in enumerate(records):
        for j, b in enumerate(records):
            if i != j and a.subject_id == b.subject_id and a.age != b.age:
                pairs.append((i, j))
    return pairs


def run_generator(bundle: ModelBundle, sources: torch.Tensor, ages: list[float],
                  seeds: list[int]) -> torch.Tensor:
    out = []
    for i in range(0, len(ages), EVAL_BATCH):
        out.append(transform_batch(bundle, sources[i:i + EVAL_BATCH], ages[i:i + EVAL_BATCH],
                                   seeds[i:i + EVAL_BATCH]))
    return torch.cat(out) if out else torch.empty(0)


def evaluate_records(records: list[PhantomRecord], generator, evaluator: ModelBundle,
                     cfg: RunConfig) -> EvalReport:
    """``generator(sources, ages, seeds) -> images``; ``evaluator`` supplies AE + IRL for ARI."""
    if len({r.subject_id for r in records}) < 2:
        raise DomainError("evaluation needs at least two subjects")
    pairs = enumerate_pairs(records)
    if not pairs:
        raise DomainError("evaluation set has no intra-subject cross-age pairs")
    src = torch.stack([records[i].image for i, _ in pairs])
    tgt = torch.stack([records[j].image for _, j in pairs])
    ages = [records[j].age for _, j in pairs]
    seeds = [cfg.sample_seed + k for k in range(len(pairs))]
    gen = generator(src, ages, seeds)
    meta = [{"subject_id": records[i].subject_id, "source_age": records[i].age}
            for i, _ in pairs]
    return summarize(src, tgt, gen, ages, [records[j].subject_id for _, j in pairs],
                     evaluator.ae, evaluator.irl, cfg.feature_seed, cfg.cluster_seed, meta)


def read_manifest(path) -> list[PhantomRecord]:
    path = Path(path)
    try:
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise DomainError(f"cannot read manifest {path}: {e}") from None
    if not rows:
        raise DomainError(f"manifest {path} is empty")
    recs = []
    for r in rows:
        img = read_image(path.parent / r["filename"])
        recs.append(PhantomRecord(img, int(r["subject_id"]), float(r["age"])))
    return recs


def write_manifest(records: list[PhantomRecord], out_dir, prefix: str = "") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "age", "filename"])
        for r in records:
            name = f"{prefix}s{r.subject_id:04d}_a{r.age:g}.pgm"
            write_pgm(out / name, r.image)
            w.writerow([r.subject_id, f"{r.age:g}", name])
    return out / "manifest.csv"


def bundle_generator(bundle: ModelBundle):
    return lambda src, ages, seeds: run_generator(bundle, src, ages, seeds)


def evaluate(checkpoint_path, manifest_path, out_dir, evaluator_path=None) -> EvalReport:
    nx.configure_determinism()
    ck = load_checkpoint(checkpoint_path)
    cfg = from_dict({**ck.config, "out": str(out_dir)})
    bundle = load_bundle(ck, cfg)
    evaluator = bundle if evaluator_path is None else load_bundle(load_checkpoint(evaluator_path))
    records = read_manifest(manifest_path)
    report = evaluate_records(records, bundle_generator(bundle), evaluator, cfg)
    report.notes["checkpoint_sha256"] = file_hash(checkpoint_path)
    report.write(out_dir)
    return report


def age_sweep(bundle: ModelBundle, records: list[PhantomRecord], ages: list[float],
              seed: int = 0) -> dict[int, list[int]]:
    """Ventricle pixel counts of each subject's first scan regenerated at ``ages``."""
    firsts = {}
    for r in records:
        firsts.setdefault(r.subject_id, r)
    sids = sorted(firsts)
    src = torch.stack([firsts[s].image for s in sids for _ in ages])
    tgt = [a for _ in sids for a in ages]
    imgs = run_generator(bundle, src, tgt, [seed] * len(tgt))
    counts = [ventricle_pixel_count(im) for im in imgs]
    return {s: counts[i * len(ages):(i + 1) * len(ages)] for i, s in enumerate(sids)}


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_ORDER = ("D", "C", "B", "A")  # D first: its projector is the shared ARI evaluator
ABLATION_COLUMNS = ("preset", "CC", "CN", "IL", "IP", "SSIM", "PSNR", "FID", "RMSE", "ARI")


def ablation(base: RunConfig, out_dir, presets=("A", "B", "C", "D")) -> list[dict]:
    out = Path(out_dir)
    cohort = make_cohort(base)
    order = [p for p in ABLATION_ORDER if p in presets]
    if "D" not in order:
        order = ["D"] + order  # the evaluator always comes from the full configuration
    dirs: list[Path] = []
    rows = {}
    evaluator = None
    for name in order:
        cfg = apply_preset(base, name).replace(out=str(out / name))
        run_all(cfg, cohort, donors=list(dirs))
        dirs.append(Path(cfg.out))
        bundle = load_bundle(load_checkpoint(Path(cfg.out) / CHECKPOINT_NAME), cfg)
        if name == "D":
            evaluator = bundle
        if name not in presets:
            continue
        t0 = time.perf_counter()
        report = evaluate_records(cohort.heldout, bundle_generator(bundle), evaluator, cfg)
        report.write(Path(cfg.out) / "eval")
        _record_timing(Path(cfg.out), "eval", time.perf_counter() - t0)
        s = report.summary
        rows[name] = {"preset": name, **{k.upper(): int(v) for k, v in PRESETS[name].items()},
                      "SSIM": s["SSIM"], "PSNR": s["PSNR"], "FID": s["FID"], "RMSE": s["RMSE"],
                      "ARI": s["ARI"]}
    table = [rows[p] for p in sorted(rows)]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in table:
            w.writerow([r[c] if c in ("preset", "CC", "CN", "IL", "IP") else f"{r[c]:.6g}"
                        for c in ABLATION_COLUMNS])
    return table
