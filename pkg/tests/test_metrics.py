import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ipldm import metrics as M
from ipldm.errors import ContractError, DimensionError

from .oracles import ari_pair_counting, kid_double_loop, psnr_direct, rmse_direct, ssim_windowed


def _img(seed, n=24):
    return np.random.default_rng(seed).random((n, n))


# --- per-pair metrics ----------------------------------------------------------------

def test_ssim_identical_is_one():
    x = _img(0)
    assert M.ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_windowed_oracle():
    x, y = _img(1), np.clip(_img(1) + 0.1 * _img(2), 0, 1)
    assert M.ssim(x, y) == pytest.approx(ssim_windowed(x, y), abs=1e-6)


def test_ssim_constant_images():
    a, b = np.full((16, 16), 0.2), np.full((16, 16), 0.6)
    mu = ((2 * 0.2 * 0.6 + M.SSIM_C1) / (0.04 + 0.36 + M.SSIM_C1))
    assert M.ssim(a, b) == pytest.approx(mu, abs=1e-9)


def test_ssim_errors():
    with pytest.raises(DimensionError):
        M.ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(DimensionError):
        M.ssim(np.zeros((16, 16)), np.zeros((16, 17)))


@settings(max_examples=20, deadline=None)
@given(s1=st.integers(0, 10 ** 6), s2=st.integers(0, 10 ** 6))
def test_ssim_symmetric_and_bounded(s1, s2):
    x, y = _img(s1, 16), _img(s2, 16)
    v = M.ssim(x, y)
    assert v == pytest.approx(M.ssim(y, x), abs=1e-12)
    assert -1 <= v <= 1


def test_psnr_rmse_against_oracles():
    x, y = _img(3), _img(4)
    assert M.psnr(x, y) == pytest.approx(psnr_direct(x, y), abs=1e-9)
    assert M.rmse(x, y) == pytest.approx(rmse_direct(x, y), abs=1e-12)
    assert M.mse(x, y) == pytest.approx(rmse_direct(x, y) ** 2, abs=1e-12)


def test_psnr_hand_case_and_identical():
    a, b = np.zeros((4, 4)), np.full((4, 4), 0.1)
    assert M.psnr(a, b) == pytest.approx(20.0)
    assert M.psnr(a, a) == math.inf
    assert M.rmse(a, a) == 0.0


def test_metrics_accept_tensors():
    x = torch.rand(1, 16, 16)
    assert M.ssim(x, x) == pytest.approx(1.0)


# --- FID / KID -------------------------------------------------------------------------

def test_fid_identical_sets_zero():
    f = np.random.default_rng(0).normal(size=(50, 4))
    assert M.fid(f, f) == pytest.approx(0.0, abs=1e-8)


def test_gaussian_fid_hand_cases():
    assert M.gaussian_fid(0.0, 1.0, 1.0, 1.0) == pytest.approx(1.0)
    assert M.gaussian_fid(0.0, 1.0, 0.0, 4.0) == pytest.approx(1.0)
    # isotropic 2-d: ||dmu||^2 + 2 (s1 - s2)^2 for variances s^2
    assert M.gaussian_fid(np.zeros(2), np.eye(2), np.array([3.0, 4.0]), 9 * np.eye(2)) == pytest.approx(25 + 2 * 4)


def test_fid_sample_estimate_close_to_closed_form():
    rng = np.random.default_rng(1)
    a, b = rng.normal(0, 1, (20000, 1)), rng.normal(1, 1, (20000, 1))
    assert M.fid(a, b) == pytest.approx(1.0, abs=0.05)


def test_fid_needs_two_samples():
    with pytest.raises(DimensionError):
        M.fid(np.zeros((1, 3)), np.zeros((5, 3)))


def test_sqrtm_psd():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 5))
    s = a @ a.T
    r = M.sqrtm_psd(s)
    np.testing.assert_allclose(r @ r, s, atol=1e-9)


def test_kid_matches_double_loop():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(7, 5)), rng.normal(0.5, 1, size=(6, 5))
    assert M.kid(x, y) == pytest.approx(kid_double_loop(x, y), abs=1e-10)


def test_kid_unbiased_near_zero_for_same_distribution():
    rng = np.random.default_rng(4)
    vals = [M.kid(rng.normal(size=(40, 4)), rng.normal(size=(40, 4))) for _ in range(30)]
    assert abs(np.mean(vals)) < 3 * np.std(vals) / np.sqrt(30) + 1e-3


def test_feature_extractor_seeded():
    imgs = torch.rand(3, 1, 32, 32)
    a, b = M.extract_features(imgs, seed=1), M.extract_features(imgs, seed=1)
    assert a.features.shape == (3, M.FEATURE_DIM)
    assert torch.equal(torch.as_tensor(a.features), torch.as_tensor(b.features))
    c = M.extract_features(imgs, seed=2)
    assert not np.allclose(np.asarray(a.features), np.asarray(c.features))


# --- ARI ---------------------------------------------------------------------------------

def test_ari_hand_cases():
    assert M.ari([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert M.ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5)
    assert M.ari([0, 1, 2], [0, 1, 2]) == 1.0


def test_ari_against_pair_counting():
    rng = np.random.default_rng(5)
    a, b = rng.integers(0, 4, 30), rng.integers(0, 3, 30)
    assert M.ari(a, b) == pytest.approx(ari_pair_counting(list(a), list(b)), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(labels=st.lists(st.integers(0, 4), min_size=4, max_size=25), seed=st.integers(0, 10 ** 6))
def test_ari_permutation_invariant(labels, seed):
    rng = np.random.default_rng(seed)
    other = rng.integers(0, 3, len(labels))
    perm = rng.permutation(5)
    relabelled = [int(perm[v]) for v in labels]
    assert M.ari(relabelled, other) == pytest.approx(M.ari(labels, other), abs=1e-12)
    order = rng.permutation(len(labels))
    assert M.ari(np.asarray(labels)[order], other[order]) == pytest.approx(M.ari(labels, other), abs=1e-12)


def test_ari_errors():
    with pytest.raises(DimensionError):
        M.ari([0, 1], [0, 1, 2])


def test_cluster_ari_separated_blobs():
    rng = np.random.default_rng(6)
    ids = np.repeat(np.arange(4), 5)
    emb = ids[:, None] * 10.0 + rng.normal(0, 0.1, (20, 3))
    assert M.cluster_ari(emb, ids, 4, seed=0) == pytest.approx(1.0)


class _Flat:
    """Stand-in encoder/identity net: the embedding is the flattened image."""

    def encode(self, x):
        return x

    def grid(self, z):
        return z

    def embed(self, g):
        return g.flatten(1)


def _clustered_images(n_ids=3, per_id=3, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    ids = [k for k in range(n_ids) for _ in range(per_id)]
    imgs = torch.stack([torch.full((1, size, size), 0.2 + 0.3 * k) + 0.01 * torch.rand(1, size, size, generator=g)
                        for k in ids])
    return imgs, ids


def test_identity_ari_with_stub_embedding():
    imgs, ids = _clustered_images()
    assert M.identity_ari(imgs, ids, _Flat(), _Flat()) == pytest.approx(1.0)


# --- reports ------------------------------------------------------------------------------

def test_decade_bins():
    assert M.decade_label(40) == "40-50" and M.decade_label(50) == "40-50"
    assert M.decade_label(50.5) == "51-60" and M.decade_label(100) == "91-100"
    assert M.decade_label(39) is None


def test_perfect_generator_report(tmp_path):
    imgs, ids = _clustered_images()
    ages = [45, 55, 65, 45, 55, 65, 45, 55, 65]
    rep = M.summarize(imgs, imgs, imgs, ages, ids, _Flat(), _Flat())
    assert rep.summary["SSIM"] == pytest.approx(1.0)
    assert rep.summary["RMSE"] == 0.0
    assert rep.summary["PSNR"] == math.inf
    assert rep.summary["ARI"] == pytest.approx(1.0)
    assert rep.summary["FID"] == pytest.approx(0.0, abs=1e-6)
    assert set(M.METRIC_FIELDS) <= set(rep.summary)
    jp, cp = rep.write(tmp_path)
    data = json.loads(jp.read_text())
    assert data["summary"]["PSNR"] == "inf"
    assert len(data["pairs"]) == 9 and {"SSIM", "PSNR", "RMSE", "target_age"} <= set(data["pairs"][0])
    rows = cp.read_text().splitlines()
    assert rows[0] == "age_bin,count,FID,KID" and len(rows) == 1 + len(M.AGE_BINS)
    # bins with fewer than two samples carry empty FID/KID fields
    assert rows[-1] == "91-100,0,,"


def test_summarize_empty():
    with pytest.raises(ContractError):
        M.summarize(torch.zeros(0, 1, 16, 16), torch.zeros(0, 1, 16, 16), torch.zeros(0, 1, 16, 16),
                    [], [], _Flat(), _Flat())


# --- embedding separation ---------------------------------------------------------------------

def test_retrieval_and_distances():
    e = np.array([[0.0, 0], [0.1, 0], [5, 5], [5.1, 5], [9, 9]])
    ids = [0, 0, 1, 1, 2]
    assert M.retrieval_accuracy(e, ids) == 1.0
    intra, inter = M.intra_inter_distance(e, ids)
    assert intra == pytest.approx(0.1) and inter > intra


def test_retrieval_needs_repeated_id():
    with pytest.raises(DimensionError):
        M.retrieval_accuracy(np.eye(3), [0, 1, 2])


def test_age_trend():
    assert M.age_trend([45, 55, 65], [10, 20, 30]) == pytest.approx(1.0)
    assert M.age_trend([45, 55, 65, 75], [4, 3, 2, 1]) == pytest.approx(-1.0)
    # ties get averaged ranks: ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4)
    assert M.age_trend([1, 2, 3, 4], [1, 5, 5, 9]) == pytest.approx(0.9486832980505138)
    with pytest.raises(DimensionError):
        M.age_trend([1], [1])
