"""Synthetic longitudinal brain phantoms with ground-truth identity and age.

A subject is an :class:`IdentitySpec`; an image is a pure function of
``(spec, age, resolution)``.  The elderly profile grows a central dark
"ventricle" with age, the infant profile sharpens tissue contrast with age.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, SamplingError

RESOLUTIONS = (32, 64, 128)
# Pixels darker than this inside the central disk are counted as ventricle.
VENTRICLE_THRESHOLD = 0.2
CENTRAL_DISK_RADIUS = 0.45  # in normalised [-1, 1] image coordinates


@dataclass(frozen=True)
class Profile:
    name: str
    age_min: float
    age_max: float
    bin_width: float
    unit: str

    def normalize(self, age: float) -> float:
        return (age - self.age_min) / (self.age_max - self.age_min)

    def check(self, age: float) -> float:
        if not (self.age_min <= age <= self.age_max) or math.isnan(age):
            raise DomainError(
                f"age {age} outside {self.name} range [{self.age_min}, {self.age_max}] {self.unit}")
        return float(age)

    def age_bin(self, age: float) -> int:
        return int((age - self.age_min) // self.bin_width)


ELDERLY = Profile("elderly", 40.0, 100.0, 5.0, "years")
INFANT = Profile("infant", 3.0, 36.0, 3.0, "months")
PROFILES = {p.name: p for p in (ELDERLY, INFANT)}


def get_profile(profile: str | Profile) -> Profile:
    if isinstance(profile, Profile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise DomainError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class IdentitySpec:
    subject_id: int
    geometry_seed: int
    skull_eccentricity: float
    fold_phase: float
    ventricle_base: float


@dataclass
class PhantomRecord:
    image: torch.Tensor  # [1, H, W], values in [0, 1]
    subject_id: int
    age: float
    profile: str = "elderly"


@dataclass
class TripletBatch:
    anchors: list[PhantomRecord]
    positives: list[PhantomRecord]
    negatives: list[PhantomRecord]

    def __post_init__(self):
        for a, p, n in zip(self.anchors, self.positives, self.negatives):
            if a.subject_id != p.subject_id or a.subject_id == n.subject_id:
                raise SamplingError("triplet violates identity labels")

    def __len__(self):
        return len(self.anchors)


def make_identity(subject_id: int, seed: int = 0) -> IdentitySpec:
    """Deterministic identity parameters for ``subject_id`` in world ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(subject_id) & 0xFFFFFFFF, 0x1D])
    rng = np.random.default_rng(ss)
    return IdentitySpec(
        subject_id=int(subject_id),
        geometry_seed=int(rng.integers(0, 2**63 - 1)),
        skull_eccentricity=float(rng.uniform(0.7, 1.0)),
        fold_phase=float(rng.uniform(0.0, 2 * math.pi)),
        ventricle_base=float(rng.uniform(0.05, 0.12)),
    )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def ventricle_radius(spec: IdentitySpec, age: float, profile: Profile = ELDERLY) -> float:
    """Ventricle radius in normalised coordinates; area is linear in age (base .. 3x base)."""
    r0 = 2.0 * spec.ventricle_base
    if profile.name != "elderly":
        return r0
    s = profile.normalize(age)
    return r0 * math.sqrt(1.0 + 2.0 * s)


def render_phantom(spec: IdentitySpec, age: float, resolution: int = 64,
                   profile: str | Profile = ELDERLY) -> PhantomRecord:
    profile = get_profile(profile)
    age = profile.check(age)
    if resolution not in RESOLUTIONS:
        raise DomainError(f"resolution {resolution} not in {RESOLUTIONS}")
    s = profile.normalize(age)

    g = np.random.default_rng(spec.geometry_seed)
    tilt = g.uniform(-0.35, 0.35)
    f1, f2 = g.uniform(2.5, 5.5), g.uniform(1.5, 4.0)
    th1, th2 = g.uniform(0, math.pi), g.uniform(0, math.pi)
    phase2 = g.uniform(0, 2 * math.pi)
    gyri = g.uniform(0.10, 0.18)

    R = resolution
    c = (np.arange(R, dtype=np.float64) + 0.5) / R * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    px = 2.0 / R  # one pixel in normalised units

    cu, su = math.cos(tilt), math.sin(tilt)
    ur, vr = cu * u + su * v, -su * u + cu * v
    ax, ay = 0.9, 0.9 * spec.skull_eccentricity
    r_ell = np.sqrt((ur / ax) ** 2 + (vr / ay) ** 2)

    if profile.name == "elderly":
        amp, edge = gyri, px
    else:
        # infant tissue starts washed out and sharpens with age
        amp, edge = gyri * (0.3 + 0.7 * s), px * (1.0 + 1.5 * (1.0 - s))

    w1 = math.pi * f1 * (u * math.cos(th1) + v * math.sin(th1)) + spec.fold_phase
    w2 = math.pi * f2 * (u * math.cos(th2) + v * math.sin(th2)) + phase2
    tissue = 0.62 + amp * np.sin(w1) + 0.5 * amp * np.sin(w2)

    outer = _sigmoid((1.0 - r_ell) * ay / edge)
    inner = _sigmoid((0.86 - r_ell) * ay / edge)
    r = np.sqrt(u ** 2 + v ** 2)
    vent = _sigmoid((ventricle_radius(spec, age, profile) - r) / edge)

    img = outer * (0.95 * (1.0 - inner) + inner * (tissue * (1.0 - vent) + 0.05 * vent))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return PhantomRecord(torch.from_numpy(img)[None], spec.subject_id, age, profile.name)


def ventricle_pixel_count(image) -> int:
    """Pixels below the ventricle threshold inside the central disk."""
    img = np.asarray(image.detach().cpu() if torch.is_tensor(image) else image, dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    R = img.shape[-1]
    c = (np.arange(R) + 0.5) / R * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    disk = u ** 2 + v ** 2 <= CENTRAL_DISK_RADIUS ** 2
    return int(((img < VENTRICLE_THRESHOLD) & disk).sum())


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _scan_ages(rng: np.random.Generator, k: int, profile: Profile) -> list[float]:
    for _ in range(100):
        if profile.name == "elderly":
            center = float(np.clip(rng.normal(70.0, 12.0), profile.age_min, profile.age_max))
            offsets = np.concatenate([[0.0], np.cumsum(rng.uniform(1.0, 10.0, size=k - 1))])
            ages = center + offsets - offsets.mean()
        else:
            clusters = rng.choice([6.0, 12.0, 24.0], size=k)
            ages = clusters + rng.normal(0.0, 1.0, size=k)
        ages = np.round(np.clip(ages, profile.age_min, profile.age_max), 2)
        if len(set(ages.tolist())) == k:
            return sorted(ages.tolist())
    raise SamplingError("could not draw distinct scan ages")


def generate_dataset(n_subjects: int, scans_per_subject_range: tuple[int, int] = (1, 5),
                     profile: str | Profile = ELDERLY, seed: int = 0, resolution: int = 64,
                     first_subject_id: int = 0) -> list[PhantomRecord]:
    """Draw a longitudinal cohort: each subject gets 1..k scans at distinct ages.

    Elderly ages centre on a clipped N(70, 12) with 1-10 year gaps; infant ages
    fall in clusters at 6, 12 and 24 months.
    """
    if n_subjects < 2:
        raise DomainError("need at least two subjects")
    lo, hi = scans_per_subject_range
    if not 1 <= lo <= hi:
        raise DomainError(f"bad scans_per_subject_range {scans_per_subject_range}")
    profile = get_profile(profile)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, first_subject_id, 0xDA7A]))
    records = []
    for sid in range(first_subject_id, first_subject_id + n_subjects):
        spec = make_identity(sid, seed)
        k = int(rng.integers(lo, hi + 1))
        for age in _scan_ages(rng, k, profile):
            records.append(render_phantom(spec, age, resolution, profile))
    return records


def by_subject(dataset: list[PhantomRecord]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, r in enumerate(dataset):
        groups[r.subject_id].append(i)
    return dict(groups)


class TripletSampler:
    """Anchor/positive/negative sampling with inverse-frequency age-bin weights."""

    def __init__(self, dataset: list[PhantomRecord], profile: str | Profile | None = None):
        if not dataset:
            raise SamplingError("empty dataset")
        self.dataset = dataset
        self.profile = get_profile(profile or dataset[0].profile)
        self.groups = by_subject(dataset)
        if len(self.groups) < 2:
            raise SamplingError("triplets need at least two subjects")
        self.anchor_pool = np.array([i for idx in self.groups.values() if len(idx) >= 2 for i in idx])
        if self.anchor_pool.size == 0:
            raise SamplingError("no subject has two or more scans")
        bins = np.array([self.profile.age_bin(dataset[i].age) for i in self.anchor_pool])
        _, inverse, counts = np.unique(bins, return_inverse=True, return_counts=True)
        w = 1.0 / counts[inverse]
        self.anchor_weights = w / w.sum()

    def sample_indices(self, rng: np.random.Generator) -> tuple[int, int, int]:
        a = int(rng.choice(self.anchor_pool, p=self.anchor_weights))
        sid = self.dataset[a].subject_id
        same = [i for i in self.groups[sid] if i != a]
        p = same[int(rng.integers(len(same)))]
        n_total = len(self.dataset) - len(self.groups[sid])
        j = int(rng.integers(n_total))
        # j-th record not belonging to sid
        for i, r in enumerate(self.dataset):
            if r.subject_id != sid:
                if j == 0:
                    return a, p, i
                j -= 1
        raise SamplingError("negative pool exhausted")  # unreachable

    def sample(self, rng: np.random.Generator, batch_size: int = 1) -> TripletBatch:
        triples = [self.sample_indices(rng) for _ in range(batch_size)]
        d = self.dataset
        return TripletBatch([d[a] for a, _, _ in triples], [d[p] for _, p, _ in triples],
                            [d[n] for _, _, n in triples])


def sample_triplet(dataset: list[PhantomRecord], rng: np.random.Generator) -> TripletBatch:
    return TripletSampler(dataset).sample(rng, 1)


class PairSampler:
    """Same-subject (source, target) pairs, direction chosen with probability 1/2."""

    def __init__(self, dataset: list[PhantomRecord]):
        self.dataset = dataset
        self.subjects = [idx for _, idx in sorted(by_subject(dataset).items()) if len(idx) >= 2]
        if not self.subjects:
            raise SamplingError("no subject has two or more scans")

    def sample_indices(self, rng: np.random.Generator) -> tuple[int, int]:
        idx = self.subjects[int(rng.integers(len(self.subjects)))]
        i, j = rng.choice(len(idx), size=2, replace=False)
        a, b = sorted((idx[int(i)], idx[int(j)]), key=lambda k: self.dataset[k].age)
        return (a, b) if rng.random() < 0.5 else (b, a)

    def sample(self, rng: np.random.Generator) -> tuple[PhantomRecord, PhantomRecord]:
        a, b = self.sample_indices(rng)
        return self.dataset[a], self.dataset[b]


def sample_pair(dataset: list[PhantomRecord], rng: np.random.Generator):
    return PairSampler(dataset).sample(rng)


def stack_images(records: list[PhantomRecord]) -> torch.Tensor:
    return torch.stack([r.image for r in records])
