import json

import numpy as np
import pytest
import torch

from ipldm import cli
from ipldm import pipeline as pl
from ipldm.checkpoint import (MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint,
                              load_checkpoint, save_checkpoint)
from ipldm.config import (PRESETS, RunConfig, apply_preset, dump_config, from_pairs, load_config,
                          paper_scale, parse_config_text)
from ipldm.errors import CheckpointError, DomainError, StageOrderError
from ipldm.imageio import read_pgm, write_pgm

TINY = ("resolution = 32\nn_subjects = 4\nn_heldout = 2\nscans_min = 2\nscans_max = 3\n"
        "ae_steps = 4\nirl_steps = 4\nirl_batch = 4\nunet_steps = 4\ncontrol_steps = 4\n"
        "ae_batch = 4\nunet_batch = 4\ncontrol_batch = 4\nT = 5\n")


# --- config --------------------------------------------------------------------------

def test_defaults_validate():
    cfg = RunConfig()
    assert cfg.latent_size == 16 and cfg.preset == "D"


def test_unknown_key_rejected():
    with pytest.raises(DomainError):
        from_pairs({"learning_rate": "0.1"})


def test_bad_values_rejected():
    for bad in ({"resolution": "48"}, {"T": "0"}, {"cc": "maybe"}, {"ae_lr": "2"}, {"seed": "-1"}):
        with pytest.raises(DomainError):
            from_pairs(bad)


def test_flag_nesting_enforced():
    with pytest.raises(DomainError):
        RunConfig(cn=False)          # il, ip still on
    with pytest.raises(DomainError):
        RunConfig(cc=False, cn=False, il=False, ip=False)


def test_presets_nest():
    flags = [apply_preset(RunConfig(), p).flags() for p in "ABCD"]
    for lo, hi in zip(flags, flags[1:]):
        assert all(hi[k] >= lo[k] for k in lo) and sum(hi.values()) == sum(lo.values()) + 1
    assert set(PRESETS) == set("ABCD")
    with pytest.raises(DomainError):
        apply_preset(RunConfig(), "E")


def test_config_text_roundtrip(tmp_path):
    cfg = RunConfig(seed=2 ** 63 + 5, ae_widths=(8, 16, 32), margin=0.35, ip=False)
    p = tmp_path / "c.txt"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_config_text_comments_and_duplicates():
    assert parse_config_text("# header\nT = 10  # steps\n\n") == {"T": " 10"}
    with pytest.raises(DomainError):
        parse_config_text("T=1\nT=2\n")
    with pytest.raises(DomainError):
        parse_config_text("just words\n")


def test_paper_scale_profile_batches():
    assert paper_scale(RunConfig()).ae_batch == 320
    assert paper_scale(RunConfig(profile="infant")).ae_batch == 256


def test_stage_hash_scoping():
    base = RunConfig()
    assert base.stage_hash("ae") == base.replace(unet_lr=0.5).stage_hash("ae")
    assert base.stage_hash("unet") != base.replace(unet_lr=0.5).stage_hash("unet")
    # the denoiser does not depend on the identity stage
    assert base.stage_hash("unet") == base.replace(margin=0.4).stage_hash("unet")
    assert base.stage_hash("control") != base.replace(margin=0.4).stage_hash("control")
    assert base.stage_hash("ae") != base.replace(seed=1).stage_hash("ae")


# --- checkpoint ---------------------------------------------------------------------------

def _ck():
    g = torch.Generator().manual_seed(0)
    return Checkpoint({"a": 1}, {"ae": "abc"}, {"note": [1.5]},
                      {"x.w": torch.randn(3, 2, generator=g), "x.b": torch.randn(3, generator=g),
                       "s": torch.tensor(2.0), "e": torch.zeros(0, 4)})


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ck = _ck()
    p = save_checkpoint(ck, tmp_path / "c.ipldm")
    back = load_checkpoint(p)
    assert back.config == ck.config and back.stages == ck.stages and back.meta == ck.meta
    assert back.tensors.keys() == ck.tensors.keys()
    for k in ck.tensors:
        assert back.tensors[k].shape == ck.tensors[k].shape
        assert torch.equal(back.tensors[k], ck.tensors[k])
    assert encode_checkpoint(back) == p.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_rejects_corruption():
    data = encode_checkpoint(_ck())
    assert data.startswith(MAGIC)
    for bad in (b"XXXXXX" + data[6:], data[:-3], data + b"\0"):
        with pytest.raises(CheckpointError):
            decode_checkpoint(bad)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ipldm")


# --- image io -------------------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path):
    img = torch.from_numpy(np.arange(256, dtype=np.float32).reshape(16, 16) / 255.0)[None]
    back = read_pgm(write_pgm(tmp_path / "a.pgm", img))
    assert torch.equal(back, img)


# --- pipeline + CLI ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.txt"
    conf.write_text(TINY)
    out = root / "run"
    assert cli.main(["train", "--config", str(conf), "--out", str(out)]) == 0
    assert cli.main(["phantom", "--config", str(conf), "--out", str(root / "held"), "--heldout"]) == 0
    return root, conf, out


def test_train_writes_artifacts(tiny_run):
    _, _, out = tiny_run
    ck = load_checkpoint(out / pl.CHECKPOINT_NAME)
    assert set(ck.stages) == {"ae", "irl", "unet", "control"}
    assert {k.split(".")[0] for k in ck.tensors} >= {"ae", "irl", "unet", "age", "fuse", "ctrl", "joint"}
    for stage in ck.stages:
        rows = pl.read_loss_log(out / "logs" / f"{stage}.csv")
        assert len(rows) == 4
    assert set(json.loads((out / "timings.json").read_text())) == set(ck.stages)


def test_stage_order_error(tmp_path):
    cfg = load_config_tiny(tmp_path)
    with pytest.raises(StageOrderError):
        pl.train(cfg, "control")
    assert cli.main(["train", "--config", str(tmp_path / "tiny.txt"), "--out", str(tmp_path / "r2"),
                     "--stage", "unet"]) == 2


def load_config_tiny(tmp_path):
    (tmp_path / "tiny.txt").write_text(TINY)
    return load_config(tmp_path / "tiny.txt").replace(out=str(tmp_path / "r1"))


def test_hash_mismatch_refused(tiny_run, tmp_path):
    root, conf, out = tiny_run
    cfg = load_config(conf).replace(out=str(out), ae_lr=0.5)
    with pytest.raises(CheckpointError):
        pl.open_run(cfg)


def test_generate_deterministic_and_sweep(tiny_run):
    root, conf, out = tiny_run
    src = sorted((root / "held").glob("*.pgm"))[0]
    ck = str(out / pl.CHECKPOINT_NAME)
    args = ["generate", "--checkpoint", ck, "--source", str(src), "--seed", "9"]
    assert cli.main(args + ["--out", str(root / "g1"), "--age", "72"]) == 0
    assert cli.main(args + ["--out", str(root / "g2"), "--age", "72"]) == 0
    a, b = root / "g1" / f"{src.stem}_age72.pgm", root / "g2" / f"{src.stem}_age72.pgm"
    assert a.read_bytes() == b.read_bytes()
    side = json.loads(a.with_suffix(".json").read_text())
    assert side["target_age"] == 72 and side["seed"] == 9 and len(side["checkpoint_sha256"]) == 64
    assert cli.main(args + ["--out", str(root / "g3"), "--ages", "45,55,65,75,85,95"]) == 0
    assert len(list((root / "g3").glob("*.pgm"))) == 6


def test_generate_user_errors(tiny_run):
    root, _, out = tiny_run
    src = sorted((root / "held").glob("*.pgm"))[0]
    ck = str(out / pl.CHECKPOINT_NAME)
    base = ["generate", "--checkpoint", ck, "--out", str(root / "gx")]
    assert cli.main(base + ["--source", str(src), "--age", "130"]) == 2
    assert cli.main(base + ["--source", str(root / "missing.pgm"), "--age", "60"]) == 2
    assert cli.main(base + ["--source", str(src)]) == 2
    bad = root / "bad.ipldm"
    bad.write_bytes(b"nonsense")
    assert cli.main(["generate", "--checkpoint", str(bad), "--source", str(src), "--age", "60",
                     "--out", str(root / "gx")]) == 2


def test_evaluate_writes_report(tiny_run):
    root, _, out = tiny_run
    ev = root / "eval"
    assert cli.main(["evaluate", "--checkpoint", str(out / pl.CHECKPOINT_NAME),
                     "--manifest", str(root / "held" / "manifest.csv"), "--out", str(ev)]) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert {"SSIM", "PSNR", "FID", "KID", "RMSE", "ARI"} <= set(rep["summary"])
    assert (ev / "report_bins.csv").read_text().startswith("age_bin,count,FID,KID")


def test_manifest_roundtrip(tiny_run):
    root, _, _ = tiny_run
    recs = pl.read_manifest(root / "held" / "manifest.csv")
    assert len({r.subject_id for r in recs}) == 2
    assert all(r.image.shape == (1, 32, 32) for r in recs)


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--out", "x", "--seed", "-3"])
    assert e.value.code == 2


def test_cli_unknown_config_key(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("bogus = 1\n")
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_cli_internal_error_exit_one(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("unexpected")
    monkeypatch.setattr(pl, "run_all", boom)
    assert cli.main(["train", "--out", str(tmp_path / "o")]) == 1


def test_cosine_lr_endpoints_and_midpoint():
    assert pl.cosine_lr(3e-3, 1, 1000) == pytest.approx(3e-3)
    assert pl.cosine_lr(3e-3, 1000, 1000) == pytest.approx(3e-4)
    # halfway through the decay: floor + (1 - floor) / 2
    assert pl.cosine_lr(1.0, 51, 101) == pytest.approx(0.55)
    assert pl.cosine_lr(1.0, 1, 1) == pytest.approx(1.0)
