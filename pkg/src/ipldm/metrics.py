"""Image-quality, distributional and clustering metrics.

FID/KID use a seeded random conv feature extractor, so values are only
comparable within this package (never against Inception-based numbers).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr
from sklearn.cluster import KMeans

from .errors import ContractError, DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FEATURE_DIM = 64
METRIC_FIELDS = ("SSIM", "PSNR", "FID", "KID", "RMSE", "ARI")
# decade bins; the first one is closed on both ends
AGE_BINS = ((40, 50), (51, 60), (61, 70), (71, 80), (81, 90), (91, 100))


def _as_2d(x) -> np.ndarray:
    a = np.asarray(x.detach().cpu() if isinstance(x, torch.Tensor) else x, dtype=np.float64)
    return a.reshape(a.shape[-2:]) if a.ndim > 2 else a


def _same_shape(x, y, op):
    if x.shape != y.shape:
        raise DimensionError(f"{op}: shapes {x.shape} and {y.shape} differ")


# ---------------------------------------------------------------------------
# per-pair metrics
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, y) -> float:
    """Mean local SSIM over all fully-contained 11x11 Gaussian windows (L = 1)."""
    x, y = _as_2d(x), _as_2d(y)
    _same_shape(x, y, "ssim")
    if min(x.shape) < SSIM_WINDOW:
        raise DimensionError(f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}px window")
    w = torch.from_numpy(gaussian_window())[None, None]

    def filt(a):
        return F.conv2d(torch.from_numpy(a)[None, None], w)[0, 0].numpy()

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def mse(x, y) -> float:
    x, y = _as_2d(x), _as_2d(y)
    _same_shape(x, y, "mse")
    return float(np.mean((x - y) ** 2))


def psnr(x, y, max_value: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE); identical images give ``inf``."""
    m = mse(x, y)
    return math.inf if m == 0 else 10.0 * math.log10(max_value ** 2 / m)


def rmse(x, y) -> float:
    return math.sqrt(mse(x, y))


# ---------------------------------------------------------------------------
# features, FID, KID
# ---------------------------------------------------------------------------

@dataclass
class FeatureSet:
    features: torch.Tensor  # [N, p] float64
    extractor_seed: int

    def __len__(self):
        return self.features.shape[0]


class FeatureExtractor(torch.nn.Module):
    """Frozen, randomly initialised 4-layer strided conv net with global average pooling."""

    def __init__(self, seed: int = 0, dim: int = FEATURE_DIM):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = (1, 16, 32, 64, dim)
        self.weights, self.biases = [], []
        for cin, cout in zip(widths[:-1], widths[1:]):
            bound = math.sqrt(6.0 / (cin * 9))  # He-uniform keeps activations alive
            self.weights.append((torch.rand(cout, cin, 3, 3, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            self.biases.append((torch.rand(cout, generator=gen, dtype=torch.float64) * 2 - 1) * 0.1)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = images.to(torch.float64)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = F.conv2d(h, w, b, stride=2, padding=1)
            if i < len(self.weights) - 1:
                h = F.relu(h)
        return h.mean(dim=(2, 3))


def extract_features(images, seed: int = 0) -> FeatureSet:
    """images: [N,1,H,W] tensor or a list of [1,H,W] tensors."""
    if isinstance(images, (list, tuple)):
        shapes = {tuple(im.shape) for im in images}
        if len(shapes) != 1:
            raise DimensionError(f"extract_features: mixed image shapes {sorted(shapes)}")
        images = torch.stack(list(images))
    return FeatureSet(FeatureExtractor(seed)(images), seed)


def _feats(fs) -> np.ndarray:
    f = fs.features if isinstance(fs, FeatureSet) else fs
    f = np.asarray(f.detach() if isinstance(f, torch.Tensor) else f, dtype=np.float64)
    return f[:, None] if f.ndim == 1 else f


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix, negative eigenvalues clamped to 0."""
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def gaussian_fid(mu_r, cov_r, mu_g, cov_g) -> float:
    mu_r, mu_g = np.atleast_1d(mu_r), np.atleast_1d(mu_g)
    cov_r, cov_g = np.atleast_2d(cov_r), np.atleast_2d(cov_g)
    # Tr sqrt(Sr Sg) = Tr sqrt(sqrt(Sr) Sg sqrt(Sr)), which stays symmetric
    sr = sqrtm_psd(cov_r)
    cross = np.trace(sqrtm_psd(sr @ cov_g @ sr))
    val = float(np.sum((mu_r - mu_g) ** 2) + np.trace(cov_r) + np.trace(cov_g) - 2 * cross)
    return max(val, 0.0)


def fid(real, gen) -> float:
    r, g = _feats(real), _feats(gen)
    if len(r) < 2 or len(g) < 2:
        raise DimensionError("fid needs at least 2 samples per set")
    if r.shape[1] != g.shape[1]:
        raise DimensionError("fid: feature dimensions differ")
    return gaussian_fid(r.mean(0), np.cov(r, rowvar=False), g.mean(0), np.cov(g, rowvar=False))


def poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kid(x, y) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel."""
    x, y = _feats(x), _feats(y)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise DimensionError("kid needs at least 2 samples per set")
    kxx, kyy, kxy = poly_kernel(x, x), poly_kernel(y, y), poly_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2 * kxy.mean())


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def _comb2(n):
    return n * (n - 1) / 2.0


def ari(labels_true, labels_pred) -> float:
    """Adjusted Rand index from the contingency table."""
    a, b = np.asarray(labels_true), np.asarray(labels_pred)
    if a.shape != b.shape:
        raise DimensionError("ari: label lists differ in length")
    if a.size < 2:
        raise DimensionError("ari needs at least 2 items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    index = _comb2(table).sum()
    sa, sb = _comb2(table.sum(1)).sum(), _comb2(table.sum(0)).sum()
    expected = sa * sb / _comb2(a.size)
    max_index = (sa + sb) / 2
    if max_index == expected:  # both partitions trivial (all-singletons or one block)
        return 1.0
    return float((index - expected) / (max_index - expected))


def cluster_ari(embeddings, labels_true, k: int, seed: int = 0) -> float:
    e = np.asarray(embeddings.detach() if isinstance(embeddings, torch.Tensor) else embeddings,
                   dtype=np.float64)
    if len(e) < k:
        raise DimensionError(f"identity_ari: {len(e)} samples for {k} clusters")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=50, random_state=seed)
    return ari(labels_true, km.fit_predict(e))


@torch.no_grad()
def identity_ari(images: torch.Tensor, subject_ids, ae, irl, k: int | None = None, seed: int = 0) -> float:
    """Cluster projector embeddings of ``images`` [N,1,H,W] and score against true ids."""
    k = len(set(subject_ids)) if k is None else k
    if images.shape[0] < k:
        raise DimensionError(f"identity_ari: {images.shape[0]} images for {k} clusters")
    emb = torch.cat([irl.embed(irl.grid(ae.encode(images[i:i + 64])))
                     for i in range(0, images.shape[0], 64)])
    return cluster_ari(emb, list(subject_ids), k, seed)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _decade_index(age: float) -> int | None:
    if age < 40 or age > 100:
        return None
    return 0 if age <= 50 else min(int(math.ceil(age / 10.0)) - 5, len(AGE_BINS) - 1)


def decade_label(age: float) -> str | None:
    i = _decade_index(age)
    return None if i is None else "{}-{}".format(*AGE_BINS[i])


def _finite_or_null(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


@dataclass
class EvalReport:
    pairs: list[dict] = field(default_factory=list)   # per pair: source/target meta + SSIM/PSNR/RMSE
    bins: list[dict] = field(default_factory=list)    # per age bin: count, FID, KID
    summary: dict = field(default_factory=dict)       # SSIM, PSNR, FID, KID, RMSE, ARI
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def enc(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            if isinstance(v, dict):
                return {k: enc(x) for k, x in v.items()}
            if isinstance(v, list):
                return [enc(x) for x in v]
            return v
        return json.dumps(enc(asdict(self)), indent=2, sort_keys=True)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jp, cp = out / "report.json", out / "report_bins.csv"
        jp.write_text(self.to_json() + "\n")
        with open(cp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["age_bin", "count", "FID", "KID"])
            for b in self.bins:
                w.writerow([b["age_bin"], b["count"], _fmt(b["FID"]), _fmt(b["KID"])])
        return jp, cp


def _fmt(v):
    return "" if v is None else f"{v:.6g}"


def summarize(sources, targets, generated, target_ages, generated_ids, ae, irl,
              feature_seed: int = 0, cluster_seed: int = 0, meta: list[dict] | None = None) -> EvalReport:
    """Full report over aligned [N,1,H,W] tensors of real targets and generated images.

    Per-pair SSIM/PSNR/RMSE compare generated to the real target; FID/KID
    compare real and generated feature sets within each decade bin of the
    target age (bins with fewer than 2 samples are reported as null).  ARI
    clusters the generated images by identity.
    """
    n = generated.shape[0]
    if n == 0:
        raise ContractError("summarize: no pairs to evaluate")
    meta = meta or [{} for _ in range(n)]
    pairs = []
    for i in range(n):
        row = dict(meta[i])
        row.update(target_age=float(target_ages[i]), SSIM=ssim(generated[i], targets[i]),
                   PSNR=psnr(generated[i], targets[i]), RMSE=rmse(generated[i], targets[i]))
        pairs.append(row)
    real_f = extract_features(targets, feature_seed).features
    gen_f = extract_features(generated, feature_seed).features
    bins = []
    labels = [decade_label(a) for a in target_ages]
    for lo, hi in AGE_BINS:
        lab = f"{lo}-{hi}"
        idx = [i for i, l in enumerate(labels) if l == lab]
        if len(idx) >= 2:
            bins.append({"age_bin": lab, "count": len(idx),
                         "FID": fid(real_f[idx], gen_f[idx]), "KID": kid(real_f[idx], gen_f[idx])})
        else:
            bins.append({"age_bin": lab, "count": len(idx), "FID": None, "KID": None})
    psnrs = [p["PSNR"] for p in pairs]
    summary = {
        "SSIM": float(np.mean([p["SSIM"] for p in pairs])),
        "PSNR": math.inf if all(math.isinf(v) for v in psnrs)
        else float(np.mean([v for v in psnrs if not math.isinf(v)])),
        "FID": fid(real_f, gen_f) if n >= 2 else None,
        "KID": kid(real_f, gen_f) if n >= 2 else None,
        "RMSE": float(np.mean([p["RMSE"] for p in pairs])),
        "ARI": identity_ari(generated, generated_ids, ae, irl, seed=cluster_seed),
    }
    notes = {"feature_extractor": f"seeded random conv net (seed {feature_seed}); "
             "FID/KID are not comparable to Inception-based values",
             "psnr_identical_pairs": sum(math.isinf(v) for v in psnrs)}
    return EvalReport(pairs, bins, summary, notes)


# ---------------------------------------------------------------------------
# embedding separation
# ---------------------------------------------------------------------------

def _pairwise(e: np.ndarray) -> np.ndarray:
    sq = (e ** 2).sum(1)
    return np.sqrt(np.clip(sq[:, None] + sq[None, :] - 2 * e @ e.T, 0.0, None))


def retrieval_accuracy(embeddings, ids) -> float:
    """Fraction of items whose nearest other item (Euclidean) shares their id.

    Items whose id occurs only once are skipped since they have no valid match.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(ids)
    d = _pairwise(e)
    np.fill_diagonal(d, np.inf)
    keep = [i for i in range(len(ids)) if (ids == ids[i]).sum() > 1]
    if not keep:
        raise DimensionError("retrieval needs at least one id with two items")
    return float(np.mean([ids[int(np.argmin(d[i]))] == ids[i] for i in keep]))


def intra_inter_distance(embeddings, ids) -> tuple[float, float]:
    e = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(ids)
    d = _pairwise(e)
    same = ids[:, None] == ids[None, :]
    off = ~np.eye(len(ids), dtype=bool)
    return float(d[same & off].mean()), float(d[~same].mean())


def age_trend(ages, counts) -> float:
    """Spearman rank correlation between target ages and a per-image measurement."""
    if len(ages) != len(counts) or len(ages) < 2:
        raise DimensionError("age_trend needs two aligned sequences of length >= 2")
    rho = spearmanr(ages, counts)[0]
    return float("nan") if rho is None else float(rho)
