"""Quantitative instruments: image quality, pixel chaos, retrieval quality.

All functions are pure and reentrant. Images are float tensors/arrays in
[0, 1]; retrieval inputs are explicit rankings with relevance labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor

PSNR_INFINITE = math.inf


def _as_image(value, what: str) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    if arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12:
        raise ValueError(f"{what}: values outside [0, 1] (min {arr.min():.6g}, max {arr.max():.6g})")
    return arr


@dataclass(frozen=True)
class ImagePair:
    """A reference image and a candidate to score against it."""

    reference: np.ndarray
    candidate: np.ndarray

    def __post_init__(self):
        ref = _as_image(self.reference, "ImagePair.reference")
        cand = _as_image(self.candidate, "ImagePair.candidate")
        if ref.shape != cand.shape:
            raise ValueError(f"ImagePair: shape mismatch {ref.shape} vs {cand.shape}")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "candidate", cand)


def psnr(pair: ImagePair) -> float:
    """Peak signal-to-noise ratio in dB, peak value 1.0.

    Identical images yield the ``PSNR_INFINITE`` sentinel (+inf).
    """
    mse = float(np.mean((pair.reference - pair.candidate) ** 2))
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(1.0 / mse)


def ssim(pair: ImagePair, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local structural similarity with a uniform window, stride 1.

    Computed per channel over every fully contained ``window x window``
    patch, then averaged across patches and channels. Dynamic range is 1.
    """
    ref, cand = pair.reference, pair.candidate
    if ref.ndim == 2:
        ref = ref[None]
        cand = cand[None]
    if ref.ndim != 3:
        raise ValueError(f"ssim: expected (H,W) or (C,H,W) images, got shape {ref.shape}")
    _, h, w = ref.shape
    if h < window or w < window:
        raise ValueError(f"ssim: image {h}x{w} smaller than {window}x{window} window")

    c1 = k1 * k1
    c2 = k2 * k2
    values = []
    for a, b in zip(ref, cand):
        wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
        wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
        mu_a = wa.mean(axis=(-1, -2))
        mu_b = wb.mean(axis=(-1, -2))
        var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
        var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
        cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        values.append(num / den)
    return float(np.mean(values))


def _normal_cdf(z: np.ndarray) -> np.ndarray:
    # Phi via the error function; |erf error| < 1e-7 over the real line.
    return 0.5 * (1.0 + erf(z / math.sqrt(2.0)))


def ad_statistic(samples) -> float:
    """Anderson-Darling A^2 against a normal with estimated mean/variance.

    Samples are standardized by their sample mean and standard deviation
    (ddof=1), sorted, and scored as

        A^2 = -n - (1/n) * sum_i (2i - 1) * [ln F(z_i) + ln(1 - F(z_{n+1-i}))]

    then corrected for sample size by ``A^2 * (1 + 0.75/n + 2.25/n^2)``.
    Values near zero mean the samples look normal; large values mean they
    do not. Raises on fewer than 8 samples or zero variance.
    """
    arr = samples.data if isinstance(samples, Tensor) else np.asarray(samples, dtype=np.float64)
    flat = arr.reshape(-1).astype(np.float64)
    n = flat.size
    if n < 8:
        raise ValueError(f"ad_statistic: need at least 8 samples, got {n}")
    std = flat.std(ddof=1)
    if std == 0.0:
        raise ValueError("ad_statistic: zero variance samples")
    z = np.sort((flat - flat.mean()) / std)
    cdf = np.clip(_normal_cdf(z), 1e-300, 1.0 - 1e-16)
    i = np.arange(1, n + 1, dtype=np.float64)
    a2 = -n - np.mean((2.0 * i - 1.0) * (np.log(cdf) + np.log(1.0 - cdf[::-1])))
    return float(a2 * (1.0 + 0.75 / n + 2.25 / (n * n)))


@dataclass(frozen=True)
class RankedRetrieval:
    """Per-query gallery rankings plus relevance labels.

    ``rankings[q]`` lists gallery indices in decreasing similarity order and
    must be a permutation of ``range(gallery_size)``; ``relevant[q]`` is the
    set of gallery indices that match query ``q`` (at least one per query).
    """

    rankings: Sequence[Sequence[int]]
    relevant: Sequence[frozenset[int]]

    def __post_init__(self):
        if len(self.rankings) == 0:
            raise ValueError("RankedRetrieval: no queries")
        if len(self.rankings) != len(self.relevant):
            raise ValueError("RankedRetrieval: rankings and relevance lists differ in length")
        gallery = len(self.rankings[0])
        frozen_rankings = []
        frozen_relevant = []
        for q, (ranking, rel) in enumerate(zip(self.rankings, self.relevant)):
            ranking = tuple(int(r) for r in ranking)
            if sorted(ranking) != list(range(gallery)):
                raise ValueError(f"RankedRetrieval: query {q} ranking is not a permutation of the gallery")
            rel = frozenset(int(r) for r in rel)
            if not rel:
                raise ValueError(f"RankedRetrieval: query {q} has no relevant gallery item")
            if not all(0 <= r < gallery for r in rel):
                raise ValueError(f"RankedRetrieval: query {q} relevance labels outside gallery")
            frozen_rankings.append(ranking)
            frozen_relevant.append(rel)
        object.__setattr__(self, "rankings", tuple(frozen_rankings))
        object.__setattr__(self, "relevant", tuple(frozen_relevant))

    @property
    def gallery_size(self) -> int:
        return len(self.rankings[0])


def cmc_rank_k(retrieval: RankedRetrieval, k: int) -> float:
    """Fraction of queries with at least one relevant item in the top k."""
    if k < 1 or k > retrieval.gallery_size:
        raise ValueError(f"cmc_rank_k: k={k} outside [1, {retrieval.gallery_size}]")
    hits = 0
    for ranking, rel in zip(retrieval.rankings, retrieval.relevant):
        if any(g in rel for g in ranking[:k]):
            hits += 1
    return hits / len(retrieval.rankings)


def mean_ap(retrieval: RankedRetrieval) -> float:
    """Mean over queries of average precision at relevant positions."""
    aps = []
    for ranking, rel in zip(retrieval.rankings, retrieval.relevant):
        found = 0
        precisions = []
        for pos, g in enumerate(ranking, start=1):
            if g in rel:
                found += 1
                precisions.append(found / pos)
        aps.append(sum(precisions) / len(rel))
    return float(np.mean(aps))


def m_inp(retrieval: RankedRetrieval) -> float:
    """Mean inverse negative penalty: |relevant| / rank of the hardest match."""
    inps = []
    for ranking, rel in zip(retrieval.rankings, retrieval.relevant):
        hardest = max(pos for pos, g in enumerate(ranking, start=1) if g in rel)
        inps.append(len(rel) / hardest)
    return float(np.mean(inps))
