"""Metric oracles: closed forms, exhaustive enumerations, independent recomputations."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fadekit.metrics import (
    ImagePair,
    RankedRetrieval,
    ad_statistic,
    cmc_rank_k,
    m_inp,
    mean_ap,
    psnr,
    ssim,
)

# -- psnr -----------------------------------------------------------------------------


def test_psnr_identical_is_infinite():
    img = np.random.default_rng(0).random((3, 8, 8))
    assert psnr(ImagePair(img, img)) == math.inf


def test_psnr_uniform_offset_closed_form():
    ref = np.full((3, 10, 10), 0.4)
    cand = ref + 0.1  # MSE = 0.01 -> 20 dB
    assert abs(psnr(ImagePair(ref, cand)) - 20.0) < 1e-9


def test_psnr_black_vs_white_is_zero():
    assert abs(psnr(ImagePair(np.zeros((8, 8)), np.ones((8, 8))))) < 1e-12


def test_psnr_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        ImagePair(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))


def test_psnr_range_enforced():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ImagePair(np.full((8, 8), 1.5), np.zeros((8, 8)))


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.02, max_value=0.4), st.floats(min_value=1.05, max_value=2.0))
def test_psnr_decreases_as_error_scales(base_amp, factor):
    rng = np.random.default_rng(11)
    ref = rng.random((3, 8, 8)) * 0.5 + 0.25
    delta = rng.uniform(-1.0, 1.0, size=ref.shape)
    small = np.clip(ref + base_amp * 0.5 * delta, 0.0, 1.0)
    large = np.clip(ref + min(base_amp * factor, 0.49) * delta, 0.0, 1.0)
    assert psnr(ImagePair(ref, large)) < psnr(ImagePair(ref, small))


# -- ssim -----------------------------------------------------------------------------


def naive_ssim(a: np.ndarray, b: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Direct windowed computation: explicit loops, population moments."""
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = k1 * k1, k2 * k2
    values = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - window + 1):
            for j in range(a.shape[2] - window + 1):
                pa = a[ch, i : i + window, j : j + window].reshape(-1)
                pb = b[ch, i : i + window, j : j + window].reshape(-1)
                mu_a, mu_b = pa.mean(), pb.mean()
                var_a, var_b = pa.var(), pb.var()
                cov = ((pa - mu_a) * (pb - mu_b)).mean()
                values.append(
                    ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                    / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
                )
    return float(np.mean(values))


def test_ssim_identical_is_one():
    img = np.random.default_rng(1).random((3, 12, 9))
    assert abs(ssim(ImagePair(img, img)) - 1.0) < 1e-12


def test_ssim_matches_naive_windowed_oracle():
    rng = np.random.default_rng(2)
    ref = rng.random((3, 10, 9))
    cand = np.clip(ref + rng.normal(0, 0.2, size=ref.shape), 0.0, 1.0)
    got = ssim(ImagePair(ref, cand))
    want = naive_ssim(ref, cand)
    assert abs(got - want) < 1e-10


def test_ssim_inversion_is_negative():
    # high-contrast image vs its negative: structure anti-correlates
    rng = np.random.default_rng(3)
    ref = (rng.random((1, 9, 9)) > 0.5).astype(float)
    cand = 1.0 - ref
    value = ssim(ImagePair(ref, cand))
    assert value < 0.0
    assert abs(value - naive_ssim(ref, cand)) < 1e-10


def test_ssim_symmetry():
    rng = np.random.default_rng(4)
    a = rng.random((3, 8, 10))
    b = rng.random((3, 8, 10))
    assert abs(ssim(ImagePair(a, b)) - ssim(ImagePair(b, a))) < 1e-12


def test_ssim_image_smaller_than_window_rejected():
    with pytest.raises(ValueError, match="window"):
        ssim(ImagePair(np.zeros((3, 7, 12)), np.zeros((3, 7, 12))))


# -- anderson-darling -----------------------------------------------------------------


def direct_ad(samples: np.ndarray) -> float:
    """Independent evaluation using scipy's normal CDF."""
    x = np.sort(samples.astype(np.float64))
    n = x.size
    z = (x - x.mean()) / x.std(ddof=1)
    cdf = np.clip(stats.norm.cdf(z), 1e-300, 1 - 1e-16)
    i = np.arange(1, n + 1)
    a2 = -n - np.mean((2 * i - 1) * (np.log(cdf) + np.log(1 - cdf[::-1])))
    return a2 * (1 + 0.75 / n + 2.25 / n**2)


def test_ad_monte_carlo_calibration():
    draws = np.random.default_rng(5).standard_normal(10_000)
    value = ad_statistic(draws)
    assert value < 2.0
    assert abs(value - direct_ad(draws)) < 1e-9


def test_ad_matches_scipy_reference():
    draws = np.random.default_rng(6).standard_normal(500)
    ours = ad_statistic(draws)
    scipy_a2 = stats.anderson(draws, dist="norm").statistic * (1 + 0.75 / 500 + 2.25 / 500**2)
    assert abs(ours - scipy_a2) < 1e-7


def test_ad_two_value_spike_is_large():
    spike = np.concatenate([np.zeros(500), np.ones(500)])
    value = ad_statistic(spike)
    assert value > 50.0
    assert abs(value - direct_ad(spike)) < 1e-9


def test_ad_constant_samples_rejected():
    with pytest.raises(ValueError, match="variance"):
        ad_statistic(np.full(100, 0.3))


def test_ad_too_few_samples_rejected():
    with pytest.raises(ValueError, match="at least 8"):
        ad_statistic(np.arange(7, dtype=float))


@settings(max_examples=40, deadline=None)
@given(
    st.floats(min_value=1e-3, max_value=1e3),
    st.floats(min_value=-100.0, max_value=100.0),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_ad_affine_invariance(scale, shift, seed):
    samples = np.random.default_rng(seed).standard_normal(64)
    base = ad_statistic(samples)
    mapped = ad_statistic(scale * samples + shift)
    assert abs(base - mapped) < 1e-9


# -- retrieval metrics against exhaustive enumeration ---------------------------------


def brute_rank_k(ranking, relevant, k):
    return 1.0 if any(g in relevant for g in ranking[:k]) else 0.0


def brute_ap(ranking, relevant):
    precisions, found = [], 0
    for pos, g in enumerate(ranking, start=1):
        if g in relevant:
            found += 1
            precisions.append(found / pos)
    return sum(precisions) / len(relevant)


def brute_inp(ranking, relevant):
    hardest = max(pos for pos, g in enumerate(ranking, start=1) if g in relevant)
    return len(relevant) / hardest


def test_retrieval_trivial_cases():
    perfect = RankedRetrieval([[0, 1, 2]], [frozenset({0})])
    assert cmc_rank_k(perfect, 1) == 1.0
    assert mean_ap(perfect) == 1.0
    assert m_inp(perfect) == 1.0

    third = RankedRetrieval([[5, 3, 2, 0, 1, 4]], [frozenset({2})])
    assert cmc_rank_k(third, 1) == 0.0
    assert cmc_rank_k(third, 3) == 1.0

    both_first = RankedRetrieval([[1, 0, 2, 3]], [frozenset({1, 0})])
    assert mean_ap(both_first) == 1.0
    assert m_inp(both_first) == 1.0

    second = RankedRetrieval([[3, 0, 1, 2]], [frozenset({0})])
    assert mean_ap(second) == 0.5

    hard_at_4 = RankedRetrieval([[7, 5, 9, 2, 1]], [frozenset({7, 2})])
    assert m_inp(hard_at_4) == 0.5


def test_mean_ap_hand_enumerated_positions():
    # relevant at ranked positions 1, 3, 5
    retrieval = RankedRetrieval([[4, 0, 2, 1, 3]], [frozenset({4, 2, 3})])
    expected = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0
    assert abs(mean_ap(retrieval) - expected) < 1e-12


@pytest.mark.parametrize("gallery_size", [2, 3, 4, 5])
def test_retrieval_metrics_match_exhaustive_oracle(gallery_size):
    items = list(range(gallery_size))
    relevant_sets = [
        frozenset(bits)
        for r in range(1, gallery_size + 1)
        for bits in itertools.combinations(items, r)
    ]
    for relevant in relevant_sets:
        for ranking in itertools.permutations(items):
            retrieval = RankedRetrieval([list(ranking)], [relevant])
            for k in range(1, gallery_size + 1):
                assert cmc_rank_k(retrieval, k) == brute_rank_k(ranking, relevant, k)
            assert abs(mean_ap(retrieval) - brute_ap(ranking, relevant)) < 1e-12
            assert abs(m_inp(retrieval) - brute_inp(ranking, relevant)) < 1e-12
            assert m_inp(retrieval) <= cmc_rank_k(retrieval, gallery_size) + 1e-12


def test_random_ranking_rank1_expectation():
    # one relevant item among G: mean rank-1 over uniform rankings is 1/G
    rng = np.random.default_rng(8)
    gallery = 8
    trials = 10_000
    hits = 0
    for _ in range(trials):
        ranking = rng.permutation(gallery).tolist()
        hits += ranking[0] == 3
    assert abs(hits / trials - 1.0 / gallery) < 0.01


def test_retrieval_validation():
    with pytest.raises(ValueError, match="permutation"):
        RankedRetrieval([[0, 0, 1]], [frozenset({0})])
    with pytest.raises(ValueError, match="no relevant"):
        RankedRetrieval([[0, 1, 2]], [frozenset()])
    retrieval = RankedRetrieval([[0, 1, 2]], [frozenset({1})])
    with pytest.raises(ValueError, match="outside"):
        cmc_rank_k(retrieval, 4)
    with pytest.raises(ValueError, match="outside"):
        cmc_rank_k(retrieval, 0)
