"""Robustness certificates for smoothed saliency maps.

All certificates are computed from an empirical smoothed map and hold with
probability at least p jointly over its coordinates (one simultaneous
Hoeffding bound per map).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .numerics import CertificateParams, empirical_floor_fn
from .saliency import ceil_index, top_k_indices
from .smoothing import SmoothedSaliency

SmoothedLike = Union[SmoothedSaliency, np.ndarray]


@dataclass(frozen=True)
class CertificateReport:
    r_cert: int
    k: int
    params: CertificateParams
    margin_c: float
    gap_profile: list = field(default_factory=list)  # (i, Lhat(h[i]) - h[2K - i])

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "r_cert": self.r_cert,
            "margin_c": self.margin_c,
            "params": {"rho": self.params.rho, "sigma": self.params.sigma,
                       "q": self.params.q, "p": self.params.p, "n": self.params.n},
            "gap_profile": [[i, g] for i, g in self.gap_profile],
        }


@dataclass(frozen=True)
class RankCertificate:
    index: int
    certified_rank: Optional[int]  # None means uncertified

    @property
    def certified(self) -> bool:
        return self.certified_rank is not None


def _values(s: SmoothedLike, params: Optional[CertificateParams] = None) -> np.ndarray:
    if isinstance(s, SmoothedSaliency):
        if params is not None:
            if params.q != s.config.q or not math.isclose(params.sigma, s.config.sigma):
                raise ValueError(
                    f"certificate parameters (q={params.q}, sigma={params.sigma}) do not match "
                    f"the smoothing (q={s.config.q}, sigma={s.config.sigma})")
            if params.n != s.n:
                raise ValueError(f"params.n={params.n} but the map has {s.n} entries")
        return s.mean
    return np.asarray(s, dtype=float)


def topk_overlap(a, b, k: int) -> int:
    """Number of indices shared by the top-k sets of ``a`` and ``b``."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if not 1 <= k <= a.shape[-1]:
        raise ValueError(f"k={k} outside [1, {a.shape[-1]}]")
    return len(np.intersect1d(top_k_indices(a, k), top_k_indices(b, k)))


def pairwise_certified(s: SmoothedLike, i: int, j: int, params: CertificateParams) -> bool:
    """True when coordinate i provably stays at least as large as coordinate j."""
    h = _values(s, params)
    return bool(empirical_floor_fn(h[i], params) >= h[j])


def topk_certificate(s: SmoothedLike, k: int, params: CertificateParams) -> CertificateReport:
    """Largest i <= K with Lhat(h[i]) >= h[2K - i].

    Positions beyond n count as dominated (value 0), which is what the
    counting argument gives when K > n / 2.
    """
    h = _values(s, params)
    n = h.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    desc = np.sort(h)[::-1]
    floors = empirical_floor_fn(desc[:k], params)
    r_cert, profile = 0, []
    for i in range(k, 0, -1):
        j = 2 * k - i
        other = desc[j - 1] if j <= n else 0.0
        gap = float(floors[i - 1] - other)
        profile.append((i, gap))
        if r_cert == 0 and gap >= 0:
            r_cert = i
    profile.reverse()
    return CertificateReport(r_cert, k, params, params.c, profile)


def rank_certificate(s: SmoothedLike, i: int, params: CertificateParams) -> RankCertificate:
    """Smallest k with Lhat(h_i) >= h[k], or uncertified."""
    h = _values(s, params)
    if not 0 <= i < h.shape[0]:
        raise IndexError(f"index {i} out of bounds for length {h.shape[0]}")
    return RankCertificate(i, _certified_ranks(h, params, [i])[0])


def certified_ranks(s: SmoothedLike, params: CertificateParams) -> list:
    """Certified rank of every coordinate (None where uncertified)."""
    h = _values(s, params)
    return _certified_ranks(h, params, range(h.shape[0]))


def _certified_ranks(h: np.ndarray, params: CertificateParams, indices) -> list:
    asc = np.sort(h)
    n = h.shape[0]
    floors = empirical_floor_fn(h[list(indices)], params)
    # number of entries strictly above the floor; binary search on the sorted map
    above = n - np.searchsorted(asc, floors, side="right")
    return [int(a) + 1 if a < n else None for a in above]


def _rank_bound(total: float, floor_value: float, n: int) -> Optional[int]:
    if floor_value <= 0:
        return None
    return min(math.ceil(total / floor_value), n)


def median_rank_bound(median_rank: int, tau: float, params: CertificateParams) -> Optional[int]:
    """Certified-rank bound for a sparsified map given a coordinate's median rank.

    Returns ceil(ceil(tau n) / Lhat(1/2)) capped at n, or None when the
    median-rank premise fails or Lhat(1/2) = 0.
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    t = ceil_index(tau * params.n)
    if median_rank > t:
        return None
    return _rank_bound(t, empirical_floor_fn(0.5, params), params.n)


def general_rank_bound(profile, threshold: int, params: CertificateParams) -> Optional[int]:
    """Bound for any rank-only map with value-per-rank ``profile`` f(1..n).

    sum_j f(j) / Lhat(f(T) / 2), rounded up and capped at n.
    """
    f = np.asarray(profile, dtype=float)
    if f.ndim != 1 or np.any(f < 0) or np.any(np.diff(f) > 0):
        raise ValueError("profile must be a nonnegative, nonincreasing vector")
    if not 1 <= threshold <= f.shape[0]:
        raise ValueError(f"threshold {threshold} outside [1, {f.shape[0]}]")
    if f[threshold - 1] > 1:
        raise ValueError("profile values must lie in [0, 1]")
    return _rank_bound(float(f.sum()), empirical_floor_fn(f[threshold - 1] / 2.0, params), f.shape[0])
