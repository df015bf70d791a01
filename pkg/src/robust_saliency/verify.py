"""Self-check suites behind ``robust-saliency verify``.

Each suite returns a :class:`SuiteResult` whose status is "pass", "fail" or
"info". An "info" result is reported but never fails the run; it is used when
a suite is vacuous for the requested parameters (for example a Hoeffding
margin above one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .certificates import topk_certificate, topk_overlap
from .numerics import (
    CertificateParams,
    empirical_floor_fn,
    floor_fn,
    hoeffding_margin,
    std_normal_cdf,
    std_normal_inv_cdf,
)
from .smoothing import HalfSpaceProvider, SmoothingConfig, smooth

SLACK = 0.02  # Monte Carlo allowance on top of 1 - p


@dataclass
class SuiteResult:
    name: str
    status: str
    detail: str
    metrics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status != "fail"

    def line(self) -> str:
        return f"[{self.status.upper():4s}] {self.name}: {self.detail}"


def _instance(rng, n_out, d, spread=1.5):
    """Random half-spaces around x = 0 whose smoothed values spread over (0, 1)."""
    normals = rng.standard_normal((n_out, d))
    offsets = spread * np.linalg.norm(normals, axis=1) * rng.standard_normal(n_out)
    return HalfSpaceProvider(normals, offsets)


def _ball(rng, count, d, rho):
    """Points drawn uniformly from the L2 ball of radius rho."""
    u = rng.standard_normal((count, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * rho * rng.random((count, 1)) ** (1.0 / d)


def halfspace_suite(trials: int = 50, q: int = 10_000, n_out: int = 20, d: int = 5,
                    sigma: float = 0.7, seed: int = 0) -> SuiteResult:
    """Max-coordinate error of smoothing against the closed form, within 3 / sqrt(q)."""
    rng = np.random.default_rng(seed)
    tol = 3.0 / math.sqrt(q)
    errors = []
    for t in range(trials):
        hs = HalfSpaceProvider.random(n_out, d, rng)
        x = rng.standard_normal(d)
        est = smooth(hs, x, SmoothingConfig(sigma, q, seed=seed * 1000 + t), track_ranks=False).mean
        errors.append(float(np.max(np.abs(est - hs.population(x, sigma)))))
    errors = np.array(errors)
    frac = float(np.mean(errors <= tol))
    status = "pass" if frac >= 0.95 else "fail"
    return SuiteResult("halfspace", status,
                       f"{frac:.1%} of {trials} trials within 3/sqrt(q) = {tol:.4f}",
                       {"fraction_within": frac, "tolerance": tol, "max_error": float(errors.max())})


def hoeffding_suite(q: int = 1000, trials: int = 200, p: float = 0.95, n_out: int = 50,
                    d: int = 5, sigma: float = 1.0, seed: int = 0) -> SuiteResult:
    """Fraction of coordinates with |h~ - h_bar| > c stays below 1 - p plus slack."""
    c = hoeffding_margin(CertificateParams(0.0, sigma, q, p, n_out))
    if c >= 1.0:
        return SuiteResult("hoeffding", "info",
                           f"margin c = {c:.3f} >= 1 at q = {q}; the bound is vacuous (expected failure)",
                           {"c": c, "vacuous": True})
    rng = np.random.default_rng(seed)
    exceed = 0
    for t in range(trials):
        hs = _instance(rng, n_out, d)
        x = np.zeros(d)
        est = smooth(hs, x, SmoothingConfig(sigma, q, seed=seed * 1000 + t), track_ranks=False).mean
        exceed += int(np.sum(np.abs(est - hs.population(x, sigma)) > c))
    frac = exceed / (trials * n_out)
    status = "pass" if frac <= (1.0 - p) + SLACK else "fail"
    return SuiteResult("hoeffding", status, f"{frac:.4f} of coordinates outside c = {c:.4f}",
                       {"c": c, "fraction_outside": frac, "vacuous": False})


def _directed(hs: HalfSpaceProvider, top, rest, rho: float) -> np.ndarray:
    """Move against the top-K normals and along the runners-up: the worst case for half-spaces."""
    unit = hs.normals / np.linalg.norm(hs.normals, axis=1, keepdims=True)
    v = unit[rest].sum(axis=0) - unit[top].sum(axis=0)
    norm = np.linalg.norm(v)
    return np.zeros_like(v) if norm == 0 else rho * v / norm


def soundness_suite(trials: int = 40, perturbations: int = 100, n_out: int = 40, d: int = 10,
                    k: int = 10, sigma: float = 1.0, rho: float = 0.25, q: int = 4096,
                    p: float = 0.95, seed: int = 0,
                    certificate: Callable = topk_certificate) -> SuiteResult:
    """Top-K certificates against the exact population map of random half-space providers.

    A violation is a perturbation x~ in the rho-ball with
    overlap(h~(x), h_bar(x~), K) < r_cert.
    """
    rng = np.random.default_rng(seed)
    params = CertificateParams(rho, sigma, q, p, n_out)
    violations = total = certified = 0
    for t in range(trials):
        hs = _instance(rng, n_out, d)
        x = np.zeros(d)
        h = smooth(hs, x, SmoothingConfig(sigma, q, seed=seed * 1000 + t), track_ranks=False).mean
        r = certificate(h, k, params).r_cert
        certified += int(r > 0)
        order = np.argsort(-h, kind="stable")
        deltas = np.vstack([_ball(rng, perturbations, d, rho),
                            _directed(hs, order[:k], order[k:2 * k], rho)])
        for delta in deltas:
            total += 1
            violations += int(topk_overlap(h, hs.population(x + delta, sigma), k) < r)
    frac = violations / total
    status = "pass" if frac <= (1.0 - p) + SLACK else "fail"
    return SuiteResult("soundness", status,
                       f"{violations}/{total} perturbations below r_cert ({frac:.2%}); "
                       f"{certified}/{trials} instances with r_cert > 0",
                       {"violation_rate": frac, "certified_instances": certified})


def numerics_suite(points: int = 10_000) -> SuiteResult:
    """CDF round trip on a grid, floor-function ordering and monotonicity."""
    grid = np.linspace(1e-6, 1.0 - 1e-6, points)
    roundtrip = float(np.max(np.abs(std_normal_cdf(std_normal_inv_cdf(grid)) - grid) / grid))
    z = np.linspace(0.0, 1.0, 1001)
    problems = []
    for rho, c in ((0.0, None), (0.05, None), (0.2, 0.1), (1.0, 0.031)):
        params = CertificateParams(rho, 0.5, 1000, 0.95, 64, margin=c)
        lo, mid = empirical_floor_fn(z, params), floor_fn(z, params)
        if np.any(np.diff(mid) < 0) or np.any(np.diff(lo) < 0):
            problems.append(f"non-monotone floor at rho={rho}")
        if np.any(lo > mid + 1e-15) or np.any(mid > z + 1e-15):
            problems.append(f"ordering Lhat <= L <= z broken at rho={rho}")
    if roundtrip > 1e-9:
        problems.append(f"round trip error {roundtrip:.2e}")
    status = "fail" if problems else "pass"
    detail = "; ".join(problems) if problems else f"round trip {roundtrip:.1e}, floors ordered and monotone"
    return SuiteResult("numerics", status, detail, {"roundtrip_rel_error": roundtrip})


SUITES = {
    "halfspace": halfspace_suite,
    "hoeffding": hoeffding_suite,
    "soundness": soundness_suite,
    "numerics": numerics_suite,
}


def run_all(seed: int = 0, q: int | None = None, names=None) -> list[SuiteResult]:
    """Run the named suites (all by default). ``q`` overrides the Hoeffding suite's sample size."""
    results = []
    for name in names or SUITES:
        if name == "hoeffding":
            results.append(hoeffding_suite(seed=seed, **({"q": q} if q is not None else {})))
        elif name == "numerics":
            results.append(numerics_suite())
        else:
            results.append(SUITES[name](seed=seed))
    return results
