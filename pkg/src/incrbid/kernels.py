"""Ad-stock kernels and the closed-form time integrals used for valuation.

An impression contributes one unit of ad stock which dissipates over time
according to a probability density ``f(dt | theta)``.  Two families are
supported: the (optionally truncated) exponential and the untruncated gamma.

Because the density integrates to one, the value of an impression is a plain
sum of coefficients times weights.  Conjunctions with Fourier terms
(``sin``/``cos`` of ``2 pi n t / S``) and with retargeting event stock keep
that property: their time integrals have closed forms, implemented here.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import special

EXPONENTIAL = "exponential"
GAMMA = "gamma"
FAMILIES = (EXPONENTIAL, GAMMA)

_IMAG_TOL = 1e-10


class KernelError(ValueError):
    """Invalid kernel parameters or arguments."""


class DomainError(KernelError):
    """A kernel quantity was requested outside its domain (e.g. negative lag)."""


class UnsupportedFamilyError(KernelError):
    """The requested closed form does not exist for this kernel family."""


@dataclass(frozen=True)
class KernelSpec:
    """Ad-stock decay density.

    Parameters
    ----------
    family : str
        ``"exponential"`` or ``"gamma"``.
    tau : float
        Scale in seconds.
    shape_k : float
        Gamma shape; always 1 for the exponential family.
    truncation : float
        Upper bound of the support.  ``inf`` means untruncated.  A truncated
        exponential is renormalized by ``1 / (1 - exp(-truncation / tau))``.
    """

    family: str
    tau: float
    shape_k: float = 1.0
    truncation: float = math.inf

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise UnsupportedFamilyError(f"unknown kernel family {self.family!r}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise KernelError(f"tau must be positive and finite, got {self.tau}")
        if not self.shape_k > 0:
            raise KernelError(f"shape_k must be positive, got {self.shape_k}")
        if self.family == EXPONENTIAL and self.shape_k != 1.0:
            raise KernelError("exponential kernels have shape_k == 1")
        if not self.truncation > 0:
            raise KernelError(f"truncation must be positive, got {self.truncation}")
        if self.family == GAMMA and math.isfinite(self.truncation):
            raise KernelError("gamma kernels are untruncated")

    @classmethod
    def exponential(cls, tau: float, truncation: float = math.inf) -> KernelSpec:
        return cls(EXPONENTIAL, float(tau), 1.0, float(truncation))

    @classmethod
    def gamma(cls, shape_k: float, tau: float) -> KernelSpec:
        return cls(GAMMA, float(tau), float(shape_k), math.inf)

    @property
    def truncated(self) -> bool:
        return math.isfinite(self.truncation)

    @property
    def _norm(self) -> float:
        # mass of the untruncated exponential on [0, truncation]
        if self.truncated:
            return -math.expm1(-self.truncation / self.tau)
        return 1.0

    @property
    def max_density(self) -> float:
        """Supremum of the density over its support (``inf`` for gamma k < 1)."""
        if self.family == EXPONENTIAL:
            return 1.0 / (self.tau * self._norm)
        k = self.shape_k
        if k < 1:
            return math.inf
        if k == 1:
            return 1.0 / self.tau
        mode = (k - 1.0) * self.tau
        return float(pdf(self, np.array([mode]))[0])

    def label(self) -> str:
        if self.family == EXPONENTIAL:
            if self.truncated:
                return f"exp(tau={self.tau:g},T={self.truncation:g})"
            return f"exp(tau={self.tau:g})"
        return f"gamma(k={self.shape_k:g},tau={self.tau:g})"

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "tau": self.tau,
            "k": self.shape_k,
            "truncation": self.truncation if self.truncated else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> KernelSpec:
        trunc = d.get("truncation")
        return cls(
            str(d.get("family", EXPONENTIAL)),
            float(d["tau"]),
            float(d.get("k", 1.0)),
            math.inf if trunc is None else float(trunc),
        )


@dataclass(frozen=True)
class FourierSpec:
    """Periodic conjunction term ``sin`` (phase_a=1) or ``cos`` (phase_a=0) of ``2 pi n t / S``."""

    period_S: float
    order_n: int
    phase_a: int

    def __post_init__(self) -> None:
        if not (self.period_S > 0 and math.isfinite(self.period_S)):
            raise KernelError(f"period_S must be positive, got {self.period_S}")
        if int(self.order_n) != self.order_n or self.order_n < 0:
            raise KernelError(f"order_n must be a non-negative integer, got {self.order_n}")
        if self.phase_a not in (0, 1):
            raise KernelError(f"phase_a must be 0 or 1, got {self.phase_a}")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.order_n / self.period_S

    def term(self, t):
        """Evaluate the periodic factor at absolute time(s) ``t``."""
        ph = self.omega * np.asarray(t, dtype=float)
        return np.sin(ph) if self.phase_a == 1 else np.cos(ph)

    def label(self) -> str:
        kind = "sin" if self.phase_a == 1 else "cos"
        return f"{kind}(n={self.order_n},S={self.period_S:g})"

    def to_dict(self) -> dict[str, Any]:
        return {"S": self.period_S, "n": self.order_n, "a": self.phase_a}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FourierSpec:
        return cls(float(d["S"]), int(d["n"]), int(d.get("a", 0)))


# ---------------------------------------------------------------------------
# densities


def pdf(kernel: KernelSpec, dt: np.ndarray) -> np.ndarray:
    """Vectorized density for non-negative lags (no domain checks)."""
    dt = np.asarray(dt, dtype=float)
    if kernel.family == EXPONENTIAL:
        out = np.exp(-dt / kernel.tau) / (kernel.tau * kernel._norm)
        if kernel.truncated:
            out = np.where(dt >= kernel.truncation, 0.0, out)
        return out
    k, tau = kernel.shape_k, kernel.tau
    with np.errstate(divide="ignore", invalid="ignore"):
        logf = (k - 1.0) * np.log(dt) - dt / tau - special.gammaln(k) - k * math.log(tau)
        out = np.exp(logf)
    if k == 1.0:
        out = np.where(dt == 0, 1.0 / tau, out)
    elif k > 1.0:
        out = np.where(dt == 0, 0.0, out)
    return out


def cdf(kernel: KernelSpec, dt: np.ndarray) -> np.ndarray:
    dt = np.asarray(dt, dtype=float)
    if kernel.family == EXPONENTIAL:
        out = -np.expm1(-dt / kernel.tau) / kernel._norm
        if kernel.truncated:
            out = np.where(dt >= kernel.truncation, 1.0, out)
        return np.minimum(out, 1.0)
    return special.gammainc(kernel.shape_k, dt / kernel.tau)


def sf(kernel: KernelSpec, dt: np.ndarray) -> np.ndarray:
    """Survival ``1 - F(dt)``, accurate in the tail."""
    dt = np.asarray(dt, dtype=float)
    if kernel.family == EXPONENTIAL:
        if kernel.truncated:
            tail = np.exp(-np.minimum(dt, kernel.truncation) / kernel.tau)
            out = (tail - math.exp(-kernel.truncation / kernel.tau)) / kernel._norm
            return np.maximum(out, 0.0)
        return np.exp(-dt / kernel.tau)
    return special.gammaincc(kernel.shape_k, dt / kernel.tau)


def density_and_cdf(kernel: KernelSpec, dt: float) -> tuple[float, float]:
    """Return ``(f(dt), F(dt))`` for a single lag ``dt >= 0``."""
    if not dt >= 0:
        raise DomainError(f"negative lag dt={dt}; evaluation precedes the impression")
    arr = np.array([float(dt)])
    return float(pdf(kernel, arr)[0]), float(cdf(kernel, arr)[0])


# ---------------------------------------------------------------------------
# regularized upper incomplete gamma for complex argument


def _q_series(k: float, z: complex) -> complex:
    # P(k, z) = z^k e^-z / Gamma(k+1) * sum_n z^n / ((k+1)...(k+n))
    term = 1.0 + 0j
    total = term
    n = 0
    while True:
        n += 1
        term *= z / (k + n)
        total += term
        if abs(term) <= 1e-17 * abs(total):
            break
        if n > 5000:
            raise ArithmeticError(f"incomplete gamma series did not converge (k={k}, z={z})")
    pref = cmath.exp(k * cmath.log(z) - z - special.gammaln(k + 1.0))
    return 1.0 - pref * total


def _q_contfrac(k: float, z: complex) -> complex | None:
    # modified Lentz evaluation of Gamma(k, z) e^z z^-k
    tiny = 1e-300
    b = z + 1.0 - k
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 5000):
        an = -i * (i - k)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) <= 1e-16:
            return cmath.exp(k * cmath.log(z) - z - special.gammaln(k)) * h
    return None


def upper_gamma_q(k: float, z: complex) -> complex:
    """Regularized upper incomplete gamma ``Gamma(k, z) / Gamma(k)``.

    ``k`` must be a positive real; ``z`` may be complex with ``Re z >= 0``.
    Uses the power series near the origin and a Lentz continued fraction
    elsewhere.
    """
    if not k > 0:
        raise KernelError(f"shape must be positive, got {k}")
    z = complex(z)
    if z == 0:
        return 1.0 + 0j
    if z.real < 0:
        raise DomainError("upper_gamma_q is only implemented for Re(z) >= 0")
    if abs(z) > max(2.0, k + 1.0):
        out = _q_contfrac(k, z)
        if out is not None:
            return out
    return _q_series(k, z)


# ---------------------------------------------------------------------------
# Fourier conjunction integrals


def _require(kernel: KernelSpec, family: str) -> None:
    if kernel.family != family:
        raise UnsupportedFamilyError(f"operation requires a {family} kernel, got {kernel.family}")


def _exp_full(omega_tau: float, phase: np.ndarray, a: int) -> np.ndarray:
    # integral over [0, inf) of e^{-u} * trig(phase + omega tau u) du
    s, c = np.sin(phase), np.cos(phase)
    scale = 1.0 / (1.0 + omega_tau * omega_tau)
    if a == 1:
        return scale * (s + omega_tau * c)
    return scale * (c - omega_tau * s)


def fourier_exponential_residual(kernel: KernelSpec, fourier: FourierSpec, t_j, t):
    """Integral of ``f(s - t_j) * trig(2 pi n s / S)`` over ``[t, t_j + truncation)``.

    Vectorized over ``t_j`` and ``t``; requires ``t >= t_j``.
    """
    _require(kernel, EXPONENTIAL)
    t_j = np.asarray(t_j, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < t_j):
        raise DomainError("residual requested before the impression time")
    w = fourier.omega
    wt = w * kernel.tau
    lag = t - t_j
    if kernel.truncated:
        lag = np.minimum(lag, kernel.truncation)
    head = np.exp(-lag / kernel.tau) * _exp_full(wt, w * (t_j + lag), fourier.phase_a)
    if not kernel.truncated:
        return head
    end = kernel.truncation
    tail = math.exp(-end / kernel.tau) * _exp_full(wt, w * (t_j + end), fourier.phase_a)
    return (head - tail) / kernel._norm


def fourier_exponential_delta(kernel: KernelSpec, fourier: FourierSpec, t_j):
    """Time integral of the unit exponential ad stock times the Fourier term.

    Equals ``(sin + w tau cos) / (1 + (w tau)^2)`` for the sine term and
    ``(cos - w tau sin) / (1 + (w tau)^2)`` for the cosine term, evaluated at
    phase ``w t_j``; truncated kernels whose truncation is not a multiple of
    the period pick up the boundary term.
    """
    _require(kernel, EXPONENTIAL)
    out = fourier_exponential_residual(kernel, fourier, t_j, t_j)
    return float(out) if np.ndim(out) == 0 else out


def _gamma_parts(kernel: KernelSpec, fourier: FourierSpec, t_j: float, lag: float):
    k, tau = kernel.shape_k, kernel.tau
    wt = fourier.omega * tau
    ph = fourier.omega * t_j
    s, c = math.sin(ph), math.cos(ph)
    c_minus = complex(1.0, -wt)
    c_plus = complex(1.0, wt)

    def phi(cc: complex) -> complex:
        base = cc ** (-k)
        if lag == 0:
            return base
        return base * upper_gamma_q(k, (lag / tau) * cc)

    p_minus, p_plus = phi(c_minus), phi(c_plus)
    f_a = complex(s, -c) * p_minus + complex(s, c) * p_plus
    f_1a = complex(c, -s) * p_plus + complex(c, s) * p_minus
    a = fourier.phase_a
    val = 0.5 * (a * f_a + (1 - a) * f_1a)
    if abs(val.imag) > _IMAG_TOL * max(1.0, abs(val.real)):
        raise ArithmeticError(f"gamma Fourier integral has imaginary residue {val.imag:.3e}")
    return val.real


def gamma_fourier_delta(kernel: KernelSpec, fourier: FourierSpec, t_j: float) -> float:
    """Time integral on ``[t_j, inf)`` of the unit gamma ad stock times the Fourier term."""
    _require(kernel, GAMMA)
    return _gamma_parts(kernel, fourier, float(t_j), 0.0)


def gamma_fourier_residual(kernel: KernelSpec, fourier: FourierSpec, t_j: float, t: float) -> float:
    """Same integral restricted to ``[t, inf)``; uses the complex incomplete gamma."""
    _require(kernel, GAMMA)
    if t < t_j:
        raise DomainError(f"residual time t={t} precedes impression time t_j={t_j}")
    return _gamma_parts(kernel, fourier, float(t_j), float(t) - float(t_j))


def fourier_delta(kernel: KernelSpec, fourier: FourierSpec, t_j: float) -> float:
    if kernel.family == EXPONENTIAL:
        return fourier_exponential_delta(kernel, fourier, t_j)
    return gamma_fourier_delta(kernel, fourier, t_j)


def fourier_residual(kernel: KernelSpec, fourier: FourierSpec, t_j: float, t: float) -> float:
    if kernel.family == EXPONENTIAL:
        return float(fourier_exponential_residual(kernel, fourier, t_j, t))
    return gamma_fourier_residual(kernel, fourier, t_j, t)


def fourier_residual_array(kernel: KernelSpec, fourier: FourierSpec, t_j, t) -> np.ndarray:
    """Vectorized residual; ``t == t_j`` gives the full delta."""
    t_j = np.asarray(t_j, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), t_j.shape)
    if kernel.family == EXPONENTIAL:
        return np.asarray(fourier_exponential_residual(kernel, fourier, t_j, t), dtype=float)
    out = np.empty(t_j.shape)
    for idx in np.ndindex(t_j.shape):
        out[idx] = gamma_fourier_residual(kernel, fourier, float(t_j[idx]), float(t[idx]))
    return out


# ---------------------------------------------------------------------------
# retargeting conjunction (exponential x exponential)


def _retarget_check(ad_kernel: KernelSpec, event_kernel: KernelSpec) -> None:
    for kern in (ad_kernel, event_kernel):
        _require(kern, EXPONENTIAL)
        if kern.truncated:
            raise UnsupportedFamilyError("retarget conjunction needs untruncated exponential kernels")


def combined_tau(ad_tau: float, event_tau: float) -> float:
    """Scale of the product of two exponential densities."""
    return ad_tau * event_tau / (ad_tau + event_tau)


def retarget_product_delta(ad_kernel: KernelSpec, event_kernel: KernelSpec, t_j: float, t_r: float) -> float:
    """Integral over ``[t_j, inf)`` of impression ad stock times retarget event stock.

    Returns 0 when the impression precedes the event (the pair is not gated in).
    """
    _retarget_check(ad_kernel, event_kernel)
    if t_j < t_r:
        return 0.0
    tau, tau_r = ad_kernel.tau, event_kernel.tau
    return math.exp(-(t_j - t_r) / tau_r) / (tau + tau_r)


def retarget_product_residual(
    ad_kernel: KernelSpec, event_kernel: KernelSpec, t_j: float, t_r: float, t: float
) -> float:
    """Same integral restricted to ``[t, inf)``."""
    if t < t_j:
        raise DomainError(f"residual time t={t} precedes impression time t_j={t_j}")
    full = retarget_product_delta(ad_kernel, event_kernel, t_j, t_r)
    return full * math.exp(-(t - t_j) / combined_tau(ad_kernel.tau, event_kernel.tau))
