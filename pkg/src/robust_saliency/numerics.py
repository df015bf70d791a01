"""Gaussian special functions and the certificate floor functions.

Everything here is vectorised: scalars in, floats out; arrays in, arrays out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erfc

# Inverse-CDF domain guard. Saturation, not an exception, keeps the floor
# functions total on exact 0/1 saliency values.
ETA = 1e-15

# Acklam's rational approximation, max relative error 1.15e-9.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unwrap(out, scalar):
    return float(out) if scalar else out


def std_normal_cdf(z):
    """Standard normal CDF, saturating to 0/1 in the far tails."""
    scalar = np.ndim(z) == 0
    out = 0.5 * erfc(-np.asarray(z, dtype=float) / _SQRT2)
    return _unwrap(out, scalar)


def std_normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _acklam(p: np.ndarray) -> np.ndarray:
    z = np.empty_like(p)
    low = p < _P_LOW
    high = p > 1.0 - _P_LOW
    mid = ~(low | high)

    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        z[mid] = num / den
    for mask, sign, tail in ((low, 1.0, p), (high, -1.0, 1.0 - p)):
        if np.any(mask):
            q = np.sqrt(-2.0 * np.log(tail[mask]))
            num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
            den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
            z[mask] = sign * num / den
    return z


def std_normal_inv_cdf(p):
    """Inverse of :func:`std_normal_cdf` on the open interval (0, 1).

    Rational approximation followed by one Newton step against the
    erfc-based CDF. The upper half is computed through the lower tail so that
    the Newton residual is never formed from two numbers close to one.

    Raises
    ------
    ValueError
        If any ``p`` lies outside (0, 1).
    """
    scalar = np.ndim(p) == 0
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise ValueError("std_normal_inv_cdf is defined only on the open interval (0, 1)")

    upper = p > 0.5
    tail = np.where(upper, 1.0 - p, p)
    z = _acklam(tail)
    # Newton on the lower-tail probability: Phi(z) - tail, both small numbers.
    resid = 0.5 * erfc(-z / _SQRT2) - tail
    z = z - resid / std_normal_pdf(z)
    z = np.where(upper, -z, z)
    return _unwrap(z, scalar)


@dataclass(frozen=True)
class CertificateParams:
    """Attack radius, smoothing scale and Hoeffding parameters.

    ``margin`` overrides the Hoeffding constant c, which is otherwise derived
    from (n, p, q). The override exists for worked examples that quote c
    directly.
    """

    rho: float
    sigma: float
    q: int
    p: float
    n: int
    margin: Optional[float] = None

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if int(self.q) != self.q or self.q < 1:
            raise ValueError(f"q must be a positive integer, got {self.q}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        if self.margin is not None and not self.margin >= 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")

    @property
    def shift(self) -> float:
        """2 rho / sigma, the probit-space shift of the floor function."""
        return 2.0 * self.rho / self.sigma

    @property
    def c(self) -> float:
        return hoeffding_margin(self) if self.margin is None else float(self.margin)


def hoeffding_margin(params: CertificateParams) -> float:
    """Simultaneous (over all n coordinates) Hoeffding margin c."""
    return math.sqrt(math.log(2.0 * params.n / (1.0 - params.p)) / (2.0 * params.q))


def _shifted(u: np.ndarray, shift: float) -> np.ndarray:
    guarded = np.clip(u, ETA, 1.0 - ETA)
    # the guard can lift tiny u above itself; the floor never exceeds its argument
    return np.minimum(0.5 * erfc(-(std_normal_inv_cdf(guarded) - shift) / _SQRT2), u)


def floor_fn(z, params: CertificateParams):
    """Population floor L(z) = Phi(Phi^-1(z) - 2 rho / sigma).

    Identity when rho = 0. z = 0 maps to 0; z = 1 is evaluated at 1 - ETA.
    """
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    if np.any((z < 0) | (z > 1)):
        raise ValueError("floor_fn expects values in [0, 1]")
    if params.shift == 0.0:
        return _unwrap(z.copy(), scalar)
    out = np.where(z <= 0.0, 0.0, _shifted(z, params.shift))
    return _unwrap(out, scalar)


def empirical_floor_fn(z, params: CertificateParams):
    """Empirical floor Lhat(z) = Phi(Phi^-1(z - c) - 2 rho / sigma) - c, clamped to [0, 1]."""
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    if np.any((z < 0) | (z > 1)):
        raise ValueError("empirical_floor_fn expects values in [0, 1]")
    c = params.c
    u = z - c
    if params.shift == 0.0:
        out = u - c
    else:
        out = np.where(u <= 0.0, 0.0, _shifted(u, params.shift) - c)
    out = np.where(u <= 0.0, 0.0, np.clip(out, 0.0, 1.0))
    return _unwrap(out, scalar)
