"""Empirical Gaussian smoothing of saliency providers.

Perturbation i is drawn from a generator keyed on (seed, i // BLOCK), so any
sample can be regenerated alone and the result does not depend on how blocks
are scheduled across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .numerics import std_normal_cdf
from .saliency import ranks

BLOCK = 1024


class ContractViolation(ValueError):
    """A provider returned values outside [0, 1]; certificates would be unsound."""


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    q: int
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if int(self.q) != self.q or self.q < 1:
            raise ValueError(f"q must be a positive integer, got {self.q}")


@dataclass(frozen=True)
class SmoothedSaliency:
    mean: np.ndarray
    median_ranks: Optional[np.ndarray]
    config: SmoothingConfig
    transform: str = "unknown"

    @property
    def n(self) -> int:
        return self.mean.shape[0]


def _noise_block(seed: int, block: int, n: int, sigma: float) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
    return sigma * np.random.Generator(np.random.Philox(ss)).standard_normal((BLOCK, n))


def noise(n: int, config: SmoothingConfig, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
    """Rows start..stop-1 of the (q, n) smoothing noise matrix."""
    stop = config.q if stop is None else stop
    if start >= stop:
        return np.zeros((0, n))
    first, last = start // BLOCK, (stop - 1) // BLOCK
    parts = [_noise_block(config.seed, b, n, config.sigma) for b in range(first, last + 1)]
    eps = np.concatenate(parts) if len(parts) > 1 else parts[0]
    return eps[start - first * BLOCK: stop - first * BLOCK]


def gaussian_perturbations(x, config: SmoothingConfig) -> np.ndarray:
    """The q perturbed inputs x + eps_i as a (q, n) array."""
    x = np.asarray(x, dtype=float)
    return x + noise(x.shape[0], config)


def perturbation(x, config: SmoothingConfig, i: int) -> np.ndarray:
    """The i-th perturbed input, regenerated on its own."""
    x = np.asarray(x, dtype=float)
    return x + noise(x.shape[0], config, i, i + 1)[0]


def _bind(provider, x):
    if getattr(provider, "class_index", 0) is None and hasattr(provider, "at"):
        return provider.at(x)
    return provider


def _evaluate(provider, Z):
    if hasattr(provider, "evaluate"):
        return provider.evaluate(Z)
    return provider(Z), None


def _check_range(maps: np.ndarray) -> None:
    if not (np.all(maps >= 0.0) and np.all(maps <= 1.0)):
        bad = maps[(maps < 0.0) | (maps > 1.0) | np.isnan(maps)]
        raise ContractViolation(
            f"provider output must lie in [0, 1]; saw {bad.size} values such as {bad.flat[0]!r}")


def smooth(provider, x, config: SmoothingConfig, track_ranks: bool = True,
           workers: int = 1) -> SmoothedSaliency:
    """Average ``provider`` over q Gaussian perturbations of ``x``.

    ``provider`` maps a (B, n) batch to (B, n) values in [0, 1]. If it has an
    ``evaluate`` method returning ``(maps, raw)``, per-sample ranks are taken
    from ``raw`` (the untransformed gradient), otherwise from the maps.
    Median ranks use the lower median.
    """
    x = np.asarray(x, dtype=float)
    provider = _bind(provider, x)
    n = x.shape[0]
    n_blocks = -(-config.q // BLOCK)

    def run(block):
        start, stop = block * BLOCK, min(config.q, (block + 1) * BLOCK)
        maps, raw = _evaluate(provider, x + noise(n, config, start, stop))
        maps = np.asarray(maps, dtype=float)
        _check_range(maps)
        r = ranks(raw if raw is not None else maps) if track_ranks else None
        return maps.sum(axis=0), r

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(n_blocks)))
    else:
        results = [run(b) for b in range(n_blocks)]

    total = np.zeros_like(results[0][0])
    for block_sum, _ in results:  # fixed block order keeps the sum bit-stable
        total += block_sum
    mean = np.clip(total / config.q, 0.0, 1.0)
    med = None
    if track_ranks:
        all_ranks = np.concatenate([r for _, r in results])
        med = np.partition(all_ranks, (config.q - 1) // 2, axis=0)[(config.q - 1) // 2]
    return SmoothedSaliency(mean, med, config, getattr(provider, "tag", "custom"))


@dataclass(frozen=True)
class HalfSpaceProvider:
    """h_i(z) = 1{a_i . z >= b_i}; its Gaussian smoothing has a closed form."""

    normals: np.ndarray  # (n_out, d)
    offsets: np.ndarray  # (n_out,)

    def __call__(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        return (Z @ self.normals.T >= self.offsets).astype(float)

    def population(self, x, sigma: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        scale = sigma * np.linalg.norm(self.normals, axis=1)
        return std_normal_cdf((x @ self.normals.T - self.offsets) / scale)

    @classmethod
    def random(cls, n_out: int, d: int, rng: np.random.Generator, offset_scale: float = 1.0):
        return cls(rng.standard_normal((n_out, d)), offset_scale * rng.standard_normal(n_out))


class SamplePool:
    """Provider outputs on one Gaussian sample around ``x``, reused for nearby points.

    The population smoothing at x + delta is estimated by self-normalised
    importance sampling: weights N(eps; delta, sigma^2) / N(eps; 0, sigma^2).
    For |delta| << sigma the weights are close to one and the effective sample
    size is about q * exp(-|delta|^2 / sigma^2).
    """

    def __init__(self, provider, x, config: SmoothingConfig):
        x = np.asarray(x, dtype=float)
        provider = _bind(provider, x)
        self.x = x
        self.config = config
        self.eps = noise(x.shape[0], config)
        maps = []
        for start in range(0, config.q, BLOCK):
            m, _ = _evaluate(provider, x + self.eps[start:start + BLOCK])
            _check_range(np.asarray(m))
            maps.append(np.asarray(m, dtype=float))
        self.maps = np.concatenate(maps)

    def mean(self) -> np.ndarray:
        return self.maps.mean(axis=0)

    def reweighted(self, points, chunk: int = 8192) -> np.ndarray:
        """Estimated population smoothing at each row of ``points``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        delta = points - self.x
        s2 = self.config.sigma ** 2
        bias = 0.5 * np.sum(delta * delta, axis=1, keepdims=True) / s2
        num = np.zeros((points.shape[0], self.maps.shape[1]))
        den = np.zeros((points.shape[0], 1))
        for start in range(0, self.config.q, chunk):
            eps = self.eps[start:start + chunk]
            w = np.exp(delta @ eps.T / s2 - bias)
            num += w @ self.maps[start:start + chunk]
            den += w.sum(axis=1, keepdims=True)
        return np.clip(num / den, 0.0, 1.0)

    def effective_sample_size(self, point) -> float:
        delta = np.asarray(point, dtype=float) - self.x
        logw = self.eps @ delta / self.config.sigma ** 2
        w = np.exp(logw - logw.max())
        return float(w.sum() ** 2 / np.sum(w * w))


def population_mean(provider: Callable, x, config: SmoothingConfig) -> np.ndarray:
    """Large-q Monte Carlo stand-in for the population smoothing at ``x``."""
    return smooth(provider, x, config, track_ranks=False).mean
