"""Run configuration: dataclass with range validation, key=value files and presets."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DomainError
from .phantoms import PROFILES, RESOLUTIONS

ABLATION_FLAGS = ("cc", "cn", "il", "ip")
# rows A..D: each adds one component on top of the previous row
PRESETS = {
    "A": dict(cc=True, cn=False, il=False, ip=False),
    "B": dict(cc=True, cn=True, il=False, ip=False),
    "C": dict(cc=True, cn=True, il=True, ip=False),
    "D": dict(cc=True, cn=True, il=True, ip=True),
}


@dataclass
class RunConfig:
    profile: str = "elderly"
    resolution: int = 64
    seed: int = 0
    out: str = "runs/desk"

    # data
    n_subjects: int = 40
    n_heldout: int = 10
    scans_min: int = 2
    scans_max: int = 5

    # autoencoder
    ae_steps: int = 2000
    ae_batch: int = 16
    ae_lr: float = 2e-3
    ae_widths: tuple[int, ...] = (8, 16, 32)
    latent_channels: int = 4
    downsample: int = 4
    edge_weight: float = 0.5

    # identity representation
    irl_steps: int = 1000
    irl_batch: int = 32
    irl_lr: float = 3e-3
    margin: float = 0.2
    gamma: float = 0.005
    id_channels: int = 4
    embed_dim: int = 128

    # denoiser pretraining
    unet_steps: int = 3000
    unet_batch: int = 16
    unet_lr: float = 1e-3
    base_channels: int = 32
    hidden_dim: int = 64

    # identity control / joint training
    control_steps: int = 3000
    control_batch: int = 16
    control_lr: float = 5e-4

    # schedule; 0 means "derived from T"
    T: int = 200
    beta_start: float = 0.0
    beta_end: float = 0.0

    # ablation flags
    cc: bool = True
    cn: bool = True
    il: bool = True
    ip: bool = True

    # evaluation
    feature_seed: int = 0
    cluster_seed: int = 0
    sample_seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.ae_widths = tuple(int(w) for w in self.ae_widths)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise DomainError(f"config: {msg}")

        need(self.profile in PROFILES, f"profile must be one of {sorted(PROFILES)}")
        need(self.resolution in RESOLUTIONS, f"resolution must be one of {RESOLUTIONS}")
        need(0 <= self.seed < 2 ** 64, "seed must be a u64")
        need(self.n_subjects >= 2 and self.n_heldout >= 2, "need at least 2 train and 2 held-out subjects")
        need(1 <= self.scans_min <= self.scans_max <= 20, "scans range must satisfy 1 <= min <= max <= 20")
        for name in ("ae_steps", "irl_steps", "unet_steps", "control_steps"):
            need(0 <= getattr(self, name) <= 10 ** 6, f"{name} out of range")
        for name in ("ae_batch", "irl_batch", "unet_batch", "control_batch"):
            need(1 <= getattr(self, name) <= 4096, f"{name} out of range")
        need(self.irl_batch >= 2, "irl_batch must be >= 2 (decorrelation term)")
        for name in ("ae_lr", "irl_lr", "unet_lr", "control_lr"):
            need(0 < getattr(self, name) < 1, f"{name} must be in (0, 1)")
        need(self.downsample in (2, 4, 8) and len(self.ae_widths) == self.downsample.bit_length(),
             "downsample must be 2, 4 or 8 with log2(f)+1 widths")
        need(self.resolution % self.downsample == 0, "resolution not divisible by downsample")
        need(all(w > 0 and w % 4 == 0 for w in self.ae_widths), "ae widths must be positive multiples of 4")
        need(self.base_channels % 8 == 0 and self.base_channels > 0, "base_channels must be a multiple of 8")
        need(1 <= self.T <= 5000, "T out of range")
        need(self.beta_start >= 0 and self.beta_end >= 0 and self.beta_end < 1, "beta endpoints out of range")
        need((self.beta_start == 0) == (self.beta_end == 0), "set both beta endpoints or neither")
        need(self.margin >= 0 and self.gamma >= 0, "margin and gamma must be >= 0")
        need(self.edge_weight >= 0, "edge_weight must be >= 0")
        need(self.log_every >= 1, "log_every must be >= 1")
        # each component builds on the previous one
        need(self.cc, "concatenation (cc) is part of every configuration")
        need(not self.cn or self.cc, "cn requires cc")
        need(not self.il or self.cn, "il requires cn")
        need(not self.ip or self.il, "ip requires il")

    # -- derived ----------------------------------------------------------------
    @property
    def latent_size(self) -> int:
        return self.resolution // self.downsample

    @property
    def preset(self) -> str | None:
        flags = self.flags()
        return next((k for k, v in PRESETS.items() if v == flags), None)

    def flags(self) -> dict[str, bool]:
        return {k: getattr(self, k) for k in ABLATION_FLAGS}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ae_widths"] = list(self.ae_widths)
        return d

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def stage_hash(self, stage: str) -> str:
        """Hash of exactly the fields a stage's weights depend on (including upstream stages)."""
        d = self.to_dict()
        keys = list(STAGE_KEYS["ae"])
        if stage in ("irl", "unet", "control"):
            keys += STAGE_KEYS["irl"] if stage != "unet" else []
            keys += STAGE_KEYS["unet"] if stage != "irl" else []
        if stage == "control":
            keys += STAGE_KEYS["control"]
        payload = json.dumps({k: d[k] for k in sorted(set(keys))}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_COMMON = ("profile", "resolution", "seed", "n_subjects", "scans_min", "scans_max")
STAGE_KEYS = {
    "ae": _COMMON + ("ae_steps", "ae_batch", "ae_lr", "ae_widths", "latent_channels",
                     "downsample", "edge_weight"),
    "irl": ("irl_steps", "irl_batch", "irl_lr", "margin", "gamma", "id_channels", "embed_dim",
            "il", "ip"),
    "unet": ("unet_steps", "unet_batch", "unet_lr", "base_channels", "hidden_dim", "T",
             "beta_start", "beta_end"),
    "control": ("control_steps", "control_batch", "control_lr", "cc", "cn"),
}
STAGES = ("ae", "irl", "unet", "control")
STAGE_DEPS = {"ae": (), "irl": ("ae",), "unet": ("ae",), "control": ("ae", "irl", "unet")}


def paper_scale(cfg: RunConfig) -> RunConfig:
    """Published optimisation settings (no claim of desk feasibility)."""
    ae_batch = 320 if cfg.profile == "elderly" else 256
    return cfg.replace(ae_steps=20000, ae_batch=ae_batch, ae_lr=1e-4,
                       unet_steps=20000, unet_batch=256, unet_lr=1e-4,
                       control_steps=10000, control_batch=128, control_lr=1e-5)


def apply_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return cfg.replace(**PRESETS[name])


def _coerce(name: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise DomainError(f"config: bad value for {name}: {raw!r}") from None
    return raw


def from_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise DomainError(f"config: unknown keys {unknown}")
    updates = {k: _coerce(k, v, getattr(base, k)) for k, v in pairs.items()}
    return dataclasses.replace(base, **updates)


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in pairs:
            raise DomainError(f"config line {lineno}: duplicate key {k}")
        pairs[k] = v
    return pairs


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DomainError(f"cannot read config {path}: {e}") from None
    return from_pairs(parse_config_text(text), base)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    if "ae_widths" in d:
        d["ae_widths"] = tuple(d["ae_widths"])
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise DomainError(f"config: unknown keys {unknown}")
    return RunConfig(**d)
