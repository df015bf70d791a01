"""Gradient saliency maps and their [0, 1]-valued transforms.

All transforms act on the last axis, so a (B, n) batch of per-sample
gradients is transformed row by row.

Index conventions: ``v[[k]]`` below means the k-th largest entry of ``v``
(1-based, duplicates counted separately). A fractional k is rounded up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .nn import TinyModel, gradient_and_hvp, hessian_vector_product, input_gradient, predict

TRANSFORMS = ("raw", "scaled", "quadratic", "sparsified", "relaxed")


class NotDifferentiableError(ValueError):
    pass


def ceil_index(k: float) -> int:
    """Ceiling that ignores floating-point fuzz, so 0.1 * 30 gives 3 and not 4."""
    return math.ceil(k - 1e-9 * max(1.0, abs(k)))


@dataclass(frozen=True)
class SparsifyParams:
    tau: float
    gamma: float = 0.0

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0 <= self.gamma <= self.tau:
            raise ValueError(f"gamma must lie in [0, tau], got {self.gamma}")


def kth_largest(v, k: float):
    """Value of the ceil(k)-th largest entry along the last axis."""
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    kk = ceil_index(k)
    if not 1 <= kk <= n:
        raise IndexError(f"k={k} is out of range for {n} elements")
    out = np.partition(v, n - kk, axis=-1)[..., n - kk]
    return float(out) if np.ndim(out) == 0 else out


def ranks(v) -> np.ndarray:
    """Ordinal ranks (1 = largest) along the last axis; ties go to the lower index."""
    v = np.asarray(v, dtype=float)
    order = np.argsort(-v, axis=-1, kind="stable")
    out = np.empty(v.shape, dtype=np.int64)
    np.put_along_axis(out, order, np.broadcast_to(np.arange(1, v.shape[-1] + 1), v.shape), axis=-1)
    return out


def rank_of(v, i: int) -> int:
    v = np.asarray(v, dtype=float)
    if not 0 <= i < v.shape[-1]:
        raise IndexError(f"index {i} out of bounds for length {v.shape[-1]}")
    return int(1 + np.sum(v > v[i]) + np.sum(v[:i] == v[i]))


def top_k_indices(v, k: int) -> np.ndarray:
    """Indices of the k largest entries, in rank order, using the rank_of tie rule."""
    return np.argsort(-np.asarray(v, dtype=float), kind="stable")[:k]


def scale_unit(v) -> np.ndarray:
    """Divide by the maximum so the largest entry is one; all-zero rows stay zero."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("scale_unit expects a nonnegative vector")
    top = v.max(axis=-1, keepdims=True)
    return np.divide(v, top, out=np.zeros_like(v), where=top > 0)


def quadratic_map(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("quadratic_map expects a nonnegative vector")
    return scale_unit(v * v)


def sparsify(v, params: SparsifyParams) -> np.ndarray:
    """1 where v >= v[[tau n]], else 0. Ties at the threshold all become 1."""
    v = np.asarray(v, dtype=float)
    thr = kth_largest(v, params.tau * v.shape[-1])
    return (v >= np.expand_dims(thr, -1)).astype(float)


def _relaxed_thresholds(v: np.ndarray, params: SparsifyParams):
    n = v.shape[-1]
    low = np.expand_dims(kth_largest(v, params.tau * n), -1)
    # gamma = 0 means "no clipping": the divisor is the maximum.
    high = np.expand_dims(kth_largest(v, max(1.0, params.gamma * n)), -1)
    return low, high


def relaxed_sparsify(v, params: SparsifyParams) -> np.ndarray:
    """Zero below v[[tau n]], one at or above v[[gamma n]], v / v[[gamma n]] in between."""
    v = np.asarray(v, dtype=float)
    low, high = _relaxed_thresholds(v, params)
    middle = np.divide(np.minimum(v, high), high, out=np.zeros_like(v), where=high > 0)
    return np.where(v < low, 0.0, np.where(v >= high, 1.0, middle))


def gradient_magnitudes(model: TinyModel, x, class_index: Optional[int] = None) -> np.ndarray:
    """|d logit / dx| for the given class, the predicted class when omitted."""
    if class_index is None:
        class_index = predict(model, x)
    return np.abs(input_gradient(model, x, class_index))


@dataclass(frozen=True)
class GradientSaliency:
    """Per-sample saliency provider h(z) = transform(|grad_z f_c(z)|).

    ``class_index`` is fixed once per explained input; :meth:`at` binds it to
    the model's prediction at that input.
    """

    model: TinyModel
    transform: str = "scaled"
    sparsity: Optional[SparsifyParams] = None
    class_index: Optional[int] = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; choose from {TRANSFORMS}")
        if self.transform in ("sparsified", "relaxed") and self.sparsity is None:
            raise ValueError(f"transform {self.transform!r} needs SparsifyParams")

    @property
    def tag(self) -> str:
        if self.transform == "sparsified":
            return f"sparsified(tau={self.sparsity.tau:g})"
        if self.transform == "relaxed":
            return f"relaxed(gamma={self.sparsity.gamma:g},tau={self.sparsity.tau:g})"
        return self.transform

    @property
    def differentiable(self) -> bool:
        return self.transform != "sparsified"

    def at(self, x) -> "GradientSaliency":
        return replace(self, class_index=predict(self.model, x))

    def _cls(self) -> int:
        if self.class_index is None:
            raise ValueError("provider has no class bound; call .at(x) first")
        return self.class_index

    def apply_transform(self, g: np.ndarray) -> np.ndarray:
        if self.transform == "raw":
            return g
        if self.transform == "scaled":
            return scale_unit(g)
        if self.transform == "quadratic":
            return quadratic_map(g)
        if self.transform == "sparsified":
            return sparsify(g, self.sparsity)
        return relaxed_sparsify(g, self.sparsity)

    def evaluate(self, Z) -> tuple[np.ndarray, np.ndarray]:
        """Saliency maps and the untransformed gradient magnitudes at each row of Z."""
        g = np.abs(input_gradient(self.model, Z, self._cls()))
        return self.apply_transform(g), g

    def __call__(self, Z) -> np.ndarray:
        return self.evaluate(Z)[0]

    def sensitivity(self, grad: np.ndarray) -> np.ndarray:
        """d h_i / d grad_i with normalisers held constant (a diagonal Jacobian)."""
        if not self.differentiable:
            raise NotDifferentiableError(
                "hard-sparsified saliency has no useful gradient; "
                "attack the relaxed variant (transform='relaxed') instead")
        g = np.abs(grad)
        sign = np.sign(grad)
        if self.transform == "raw":
            return sign
        if self.transform == "scaled":
            top = g.max(axis=-1, keepdims=True)
            return np.divide(sign, top, out=np.zeros_like(g), where=top > 0)
        if self.transform == "quadratic":
            top = (g * g).max(axis=-1, keepdims=True)
            return np.divide(2.0 * grad, top, out=np.zeros_like(g), where=top > 0)
        low, high = _relaxed_thresholds(g, self.sparsity)
        band = (g >= low) & (g < high) & (high > 0)
        return np.where(band, sign / np.where(high > 0, high, 1.0), 0.0)

    def objective_gradients(self, Z, weights, hvp_method: str = "forward") -> tuple[np.ndarray, np.ndarray]:
        """Per-row maps and gradients of sum_i weights_i * h_i(z).

        The gradient is H s, with H the input Hessian of the class logit and
        s the per-coordinate sensitivities times ``weights``.
        """
        grad = input_gradient(self.model, Z, self._cls())
        maps = self.apply_transform(np.abs(grad))
        s = self.sensitivity(grad) * weights
        if hvp_method == "forward":
            _, hv = gradient_and_hvp(self.model, Z, self._cls(), s)
        else:
            hv = hessian_vector_product(self.model, Z, self._cls(), s, method=hvp_method)
        return maps, hv
