"""L2 attack on top-K overlap of saliency maps.

Projected gradient ascent on D(z) = -sum_{i in S} h_i(z), where S is the top-K
set of the saliency map at the clean input, with random restarts on the
rho-sphere and backtracking whenever a step would change the predicted class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .nn import TinyModel, predict
from .saliency import GradientSaliency, NotDifferentiableError, top_k_indices
from .smoothing import SmoothingConfig, noise

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    k: int
    rho: float
    inner_iters: int = 20  # P
    sampling_budget: int = 100  # Q
    restarts: int = 5  # T
    box: tuple = (-np.inf, np.inf)
    max_halvings: int = 20

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.rho >= 0:
            raise ValueError("rho must be >= 0")
        if min(self.inner_iters, self.sampling_budget, self.restarts) < 1:
            raise ValueError("P, Q and T must all be >= 1")
        if not self.box[0] < self.box[1]:
            raise ValueError("box must satisfy lo < hi")


@dataclass
class AttackResult:
    adversarial_input: Optional[np.ndarray]  # None when the attack failed
    achieved_D: float
    iterates_evaluated: int
    restarts_used: int
    step_substituted: bool = False  # zero gradient at x0, so the step size fell back to rho

    @property
    def failed(self) -> bool:
        return self.adversarial_input is None


class SmoothedProvider:
    """Empirical smoothing of a differentiable provider with a fixed noise draw.

    Reusing one noise draw across calls (common random numbers) makes the
    attack objective a deterministic, smooth function of z.
    """

    def __init__(self, base: GradientSaliency, config: SmoothingConfig):
        self.base = base
        self.config = config
        self._eps = None

    @property
    def class_index(self):
        return self.base.class_index

    @property
    def differentiable(self) -> bool:
        return self.base.differentiable

    @property
    def tag(self) -> str:
        return f"smoothed[{self.base.tag}]"

    def at(self, x) -> "SmoothedProvider":
        return SmoothedProvider(self.base.at(x), self.config)

    def with_seed(self, seed: int) -> "SmoothedProvider":
        return SmoothedProvider(self.base, replace(self.config, seed=seed))

    def _noise(self, n: int) -> np.ndarray:
        if self._eps is None or self._eps.shape[1] != n:
            self._eps = noise(n, self.config)
        return self._eps

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.base(z + self._noise(z.shape[0])).mean(axis=0)

    def objective_gradients(self, z, weights, hvp_method: str = "forward"):
        z = np.asarray(z, dtype=float)
        maps, grads = self.base.objective_gradients(z + self._noise(z.shape[0]), weights, hvp_method)
        return maps.mean(axis=0), grads.mean(axis=0)


def _bound(provider, x):
    if getattr(provider, "class_index", 0) is None:
        return provider.at(x)
    return provider


def _require_differentiable(provider) -> None:
    if not getattr(provider, "differentiable", True):
        raise NotDifferentiableError(
            "the attack needs gradients; hard-sparsified saliency has none. "
            "Use the relaxed variant (transform='relaxed') as the attack surrogate.")


def objective_D(provider, topk_indices: Sequence[int], z) -> float:
    """D(z) = -(sum of provider outputs at z over the fixed index set)."""
    h = np.asarray(provider(np.atleast_2d(z) if not isinstance(provider, SmoothedProvider) else z))
    h = h[0] if h.ndim == 2 else h
    return -float(np.sum(h[np.asarray(topk_indices, dtype=int)]))


def _weights(n: int, topk_indices) -> np.ndarray:
    w = np.zeros(n)
    w[np.asarray(topk_indices, dtype=int)] = 1.0
    return w


def _value_and_gradient(provider, topk_indices, z, hvp_method="forward"):
    z = np.asarray(z, dtype=float)
    w = _weights(z.shape[0], topk_indices)
    if isinstance(provider, SmoothedProvider):
        maps, grad = provider.objective_gradients(z, w, hvp_method)
    else:
        maps, grad = provider.objective_gradients(z[None, :], w, hvp_method)
        maps, grad = maps[0], grad[0]
    return -float(maps @ w), -grad


def objective_gradient(provider, topk_indices: Sequence[int], z, hvp_method: str = "forward") -> np.ndarray:
    """Gradient of D at z, with saliency normalisers treated as constants."""
    _require_differentiable(provider)
    return _value_and_gradient(provider, topk_indices, z, hvp_method)[1]


def _project(d: np.ndarray, rho: float) -> np.ndarray:
    norm = np.linalg.norm(d)
    if norm <= rho:
        return d
    d = d * (rho / norm)
    while np.linalg.norm(d) > rho:  # guard against a one-ulp overshoot
        d = d * (1.0 - 1e-12)
    return d


def l2_topk_attack(model: TinyModel, provider, x, config: AttackConfig, seed: int = 0,
                   topk_indices: Optional[Sequence[int]] = None,
                   hvp_method: str = "forward") -> AttackResult:
    """Attack the top-K overlap of ``provider`` around ``x`` without changing the label.

    ``topk_indices`` overrides the attacked set; by default it is the top-K of
    the provider's own map at ``x``. Smoothed providers are re-seeded from
    ``seed`` so the attacker's noise is independent of any evaluation noise.
    """
    x = np.asarray(x, dtype=float)
    _require_differentiable(provider)
    label = predict(model, x)
    provider = _bound(provider, x)
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss.spawn(1)[0])
    if isinstance(provider, SmoothedProvider):
        provider = provider.with_seed(int(ss.generate_state(1)[0]))
    if topk_indices is None:
        h0 = provider(x) if isinstance(provider, SmoothedProvider) else provider(x[None, :])[0]
        topk_indices = top_k_indices(h0, config.k)
    lo, hi = config.box

    def feasible(d):
        return np.clip(x + _project(d, config.rho), lo, hi)

    budget = 0
    evaluated = 0
    restarts_used = 0
    substituted = False
    best_val, best_z = -np.inf, None
    for t in range(config.restarts):
        x0 = None
        while budget < config.sampling_budget:
            budget += 1
            if config.rho > 0:
                d = rng.standard_normal(x.shape[0])
                d *= config.rho / np.linalg.norm(d)
            else:
                d = np.zeros_like(x)
            cand = feasible(d)
            if predict(model, cand) == label:
                x0 = cand
                break
        if x0 is None:
            break
        restarts_used += 1

        val, grad = _value_and_gradient(provider, topk_indices, x0, hvp_method)
        evaluated += 1
        gnorm = np.linalg.norm(grad)
        if not (np.isfinite(val) and np.isfinite(gnorm)):
            logger.warning("restart %d: non-finite objective at initialisation", t)
            continue
        if gnorm > 0:
            alpha = config.rho / gnorm
        else:
            alpha = config.rho
            substituted = True
        run_val, run_z = val, x0
        xp, diverged = x0, False
        for p in range(1, config.inner_iters + 1):
            step = xp
            for _ in range(config.max_halvings + 1):
                cand = feasible(xp + alpha * grad - x)
                if predict(model, cand) == label:
                    step = cand
                    break
                alpha /= 2.0
            xp = step
            alpha = p * alpha / (p + 1)
            val, grad = _value_and_gradient(provider, topk_indices, xp, hvp_method)
            evaluated += 1
            if not (np.isfinite(val) and np.all(np.isfinite(grad))):
                logger.warning("restart %d: non-finite gradient at iteration %d", t, p)
                diverged = True
                break
            if val > run_val:
                run_val, run_z = val, xp
        if diverged:
            continue
        if run_val > best_val:
            best_val, best_z = run_val, run_z

    if best_z is None:
        return AttackResult(None, float("nan"), evaluated, restarts_used, substituted)
    return AttackResult(best_z, best_val, evaluated, restarts_used, substituted)
