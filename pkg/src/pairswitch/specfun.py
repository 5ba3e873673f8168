"""Fundamental solutions of ``rho*phi - L phi = 0`` for the OU and IGBM spreads.

The IGBM pair is built from the confluent hypergeometric functions
``M(a, b, z)`` (Kummer) and ``U(a, b, z)`` (Tricomi); the OU pair is a
Laplace-type integral evaluated by adaptive quadrature.  Every evaluator
returns an :class:`EvalResult` carrying the value and an absolute error
estimate.

Only positive ``a``, ``b`` and real ``z >= 0`` are supported.
"""
from __future__ import annotations

import math
import warnings
from functools import lru_cache
from typing import NamedTuple

from scipy.integrate import IntegrationWarning, quad
from scipy.special import gammaln

__all__ = [
    "EvalResult",
    "HypergeometricArgs",
    "EvaluationError",
    "SpecfunDomainError",
    "kummer_m",
    "kummer_m_dz",
    "tricomi_u",
    "tricomi_u_dz",
    "tricomi_u_scaled",
    "ou_psi",
    "ou_psi_dx",
]

_EPS = 2.220446049250313e-16
_QUAD_RTOL = 1e-13

_SERIES_MAX_TERMS = 20000
# log(1e-18): tail cut for the OU integrand relative to its peak
_TAIL_LOG_CUT = 41.45


def _quad(f, lo, hi):
    """Adaptive Gauss-Kronrod ``(integral, abs_error)`` at the module tolerance.

    QUADPACK warns when rounding stops it short of ``_QUAD_RTOL``; the
    returned error estimate already accounts for that and is propagated by
    every caller, so the warning is silenced.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        return quad(f, lo, hi, epsabs=0.0, epsrel=_QUAD_RTOL, limit=200)


class EvaluationError(RuntimeError):
    """A series or quadrature failed to converge within its budget."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class SpecfunDomainError(ValueError):
    """Argument outside the supported domain."""


class EvalResult(NamedTuple):
    value: float
    abs_error_estimate: float


class HypergeometricArgs(NamedTuple):
    a: float
    b: float
    z: float

    def check(self, strict_z=False):
        if not (self.a > 0 and self.b > 0):
            raise SpecfunDomainError(f"need a > 0 and b > 0, got a={self.a}, b={self.b}")
        if strict_z and not self.z > 0:
            raise SpecfunDomainError(f"need z > 0, got z={self.z}")
        if not strict_z and not self.z >= 0:
            raise SpecfunDomainError(f"need z >= 0, got z={self.z}")
        return self


def _as_args(args, b=None, z=None):
    if b is not None:
        return HypergeometricArgs(float(args), float(b), float(z))
    return HypergeometricArgs(*map(float, args))


# ---------------------------------------------------------------------------
# Kummer M
# ---------------------------------------------------------------------------

def _kummer_series(a, b, z):
    total = 1.0
    term = 1.0
    n = 0
    while True:
        term *= (a + n) * z / ((b + n) * (n + 1))
        total += term
        n += 1
        # terms are positive; once they shrink the tail is geometric
        if term < 1e-17 * total and (a + n) * z < (b + n) * (n + 1):
            break
        if n > _SERIES_MAX_TERMS or not math.isfinite(total):
            if math.isinf(total):
                return EvalResult(math.inf, math.inf)
            raise EvaluationError("Kummer series did not converge", a=a, b=b, z=z, terms=n)
    err = (n + 2) * _EPS * total + term
    return EvalResult(total, err)


def _kummer_asymptotic(a, b, z):
    """Large-z expansion as ``(log prefactor, sum, relative error)``.

    Returns None when the expansion cannot reach double precision.
    """
    s = 1.0
    term = 1.0
    smallest = 1.0
    for n in range(400):
        ratio = (b - a + n) * (1.0 - a + n) / ((n + 1) * z)
        nxt = term * ratio
        if abs(nxt) >= abs(term):
            break
        term = nxt
        s += term
        smallest = abs(term)
        if smallest < 1e-17 * abs(s):
            break
    if smallest > 1e-15 * abs(s):
        return None
    log_pref = gammaln(b) - gammaln(a) + z + (a - b) * math.log(z)
    return log_pref, s, smallest / abs(s) + 40 * _EPS


def kummer_m(args, b=None, z=None, shift=0.0):
    """Kummer's function ``M(a, b, z)`` for ``a, b > 0`` and ``z >= 0``,
    optionally scaled as ``M(a, b, z) exp(-shift)``.

    Uses the power series (all terms positive, so no cancellation) and
    switches to the large-argument expansion
    ``Gamma(b)/Gamma(a) e^z z^(a-b) sum (b-a)_n (1-a)_n / (n! z^n)``
    beyond ``z = 50`` whenever that expansion reaches full precision.  The
    scaling is applied in log space, so ``shift`` extends the usable range
    of ``z`` beyond the double-precision overflow of ``e^z``.  Overflow is
    reported as ``inf``.
    """
    a, b, z = _as_args(args, b, z).check()
    if z == 0.0:
        f = math.exp(-shift)
        return EvalResult(f, 0.0)
    if z > 50.0:
        res = _kummer_asymptotic(a, b, z)
        if res is not None:
            log_pref, s, rel = res
            log_pref -= shift
            if log_pref > 709.0:
                return EvalResult(math.inf, math.inf)
            val = math.exp(log_pref) * s
            # exp() turns the rounding of its argument into a relative error
            rel += 2.0 * _EPS * (abs(log_pref + shift) + 1.0)
            return EvalResult(val, val * rel)
    r = _kummer_series(a, b, z)
    if shift == 0.0:
        return r
    f = math.exp(-shift)
    return EvalResult(r.value * f, r.abs_error_estimate * f)


def kummer_m_dz(args, b=None, z=None):
    """``dM/dz = (a/b) M(a+1, b+1, z)``."""
    a, b, z = _as_args(args, b, z).check()
    r = kummer_m(a + 1.0, b + 1.0, z)
    f = a / b
    return EvalResult(f * r.value, f * r.abs_error_estimate)


# ---------------------------------------------------------------------------
# Tricomi U
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1 << 16)
def _u_scaled(a, b, z):
    # z^a U(a,b,z) = 1/Gamma(a) int_0^inf e^{-s} s^{a-1} (1 + s/z)^{b-a-1} ds
    p = b - a - 1.0

    def log_body(s):
        return -s + p * math.log1p(s / z)

    # for b >> z the integrand peaks far out and can exceed the double
    # range; it is integrated relative to its maximum
    disc = (a - 1.0 - z + p) ** 2 + 4.0 * (a - 1.0) * z
    s_star = 0.5 * ((a - 1.0 - z + p) + math.sqrt(disc)) if disc >= 0 else 0.0
    log_peak = 0.0
    if s_star > 1.0:
        log_peak = max(0.0, (a - 1.0) * math.log(s_star) + log_body(s_star))

    def body(s):
        return math.exp(log_body(s) - log_peak)

    if a < 1.0:
        inv = 1.0 / a

        def head(u):
            return body(u ** inv)

        i0, e0 = _quad(head, 0.0, 1.0)
        i0, e0 = i0 * inv, e0 * inv
    else:
        def head(s):
            return s ** (a - 1.0) * body(s)

        i0, e0 = _quad(head, 0.0, 1.0)

    def tail(s):
        return math.exp((a - 1.0) * math.log(s) + log_body(s) - log_peak)

    # split the tail at the peak of the integrand
    peak = max(1.0, s_star, a - 1.0 + p)
    i1, e1 = _quad(tail, 1.0, peak + 1.0) if peak > 1.0 else (0.0, 0.0)
    i2, e2 = _quad(tail, peak + 1.0 if peak > 1.0 else 1.0, math.inf)
    total = i0 + i1 + i2
    # under a positive shift the scaled value may underflow to 0, which is harmless
    if not (math.isfinite(total) and (total > 0 or (total == 0.0 and shift > 0))):
        raise EvaluationError("U quadrature failed", a=a, b=b, z=z, value=total)
    err = e0 + e1 + e2 + 8 * _EPS * total
    log_g = log_peak - gammaln(a)
    if log_g + math.log(total) > 709.0:
        raise EvaluationError("U overflows double precision", a=a, b=b, z=z)
    g = math.exp(log_g)
    return total * g, (err + 2.0 * _EPS * abs(log_g) * total) * g


def tricomi_u_scaled(args, b=None, z=None):
    """``z**a * U(a, b, z)``, which tends to 1 as ``z`` grows."""
    a, b, z = _as_args(args, b, z).check(strict_z=True)
    v, e = _u_scaled(a, b, z)
    return EvalResult(v, e)


def tricomi_u(args, b=None, z=None):
    """Tricomi's function ``U(a, b, z)`` for ``a > 0``, ``z > 0``.

    Adaptive Gauss-Kronrod quadrature of the Laplace integral
    representation, written in the scaled variable ``s = z t`` so the
    large-``z`` limit ``z^a U -> 1`` is reached without underflow.
    """
    a, b, z = _as_args(args, b, z).check(strict_z=True)
    v, e = _u_scaled(a, b, z)
    scale = z ** (-a)
    return EvalResult(v * scale, e * scale)


def tricomi_u_dz(args, b=None, z=None):
    """``dU/dz = -a U(a+1, b+1, z)``."""
    a, b, z = _as_args(args, b, z).check(strict_z=True)
    r = tricomi_u(a + 1.0, b + 1.0, z)
    return EvalResult(-a * r.value, a * r.abs_error_estimate)


# ---------------------------------------------------------------------------
# OU fundamental solutions
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1 << 16)
def _ou_integral(nu, w, power, shift=0.0):
    """exp(-shift) int_0^inf t^(nu-1+power) exp(-t^2/2 + w t) dt, ``power`` in {0, 1}."""
    try:
        return _ou_integral_raw(nu, w, power, shift)
    except OverflowError:
        raise EvaluationError("OU integral overflows double precision", nu=nu, w=w, power=power,
                              shift=shift) from None


def _ou_integral_raw(nu, w, power, shift=0.0):
    q = nu + power

    if q < 1.0:
        inv = 1.0 / q

        def head(u):
            t = u ** inv
            return math.exp(-0.5 * t * t + w * t - shift)

        i0, e0 = _quad(head, 0.0, 1.0)
        i0, e0 = i0 * inv, e0 * inv
    else:
        def head(t):
            return t ** (q - 1.0) * math.exp(-0.5 * t * t + w * t - shift)

        i0, e0 = _quad(head, 0.0, 1.0)

    def tail(t):
        return math.exp((q - 1.0) * math.log(t) - 0.5 * t * t + w * t - shift)

    # log-integrand ~ -(t - t*)^2/2 around t* = w; cut where it is 1e-18 of the peak
    t_peak = max(1.0, w)
    t_max = t_peak + math.sqrt(2.0 * _TAIL_LOG_CUT) + 2.0 + abs(q - 1.0)
    if t_peak > 1.0:
        i1, e1 = _quad(tail, 1.0, t_peak)
        i2, e2 = _quad(tail, t_peak, t_max)
    else:
        i1, e1 = _quad(tail, 1.0, t_max)
        i2, e2 = 0.0, 0.0
    total = i0 + i1 + i2
    # under a positive shift the scaled value may underflow to 0, which is harmless
    if not (math.isfinite(total) and (total > 0 or (total == 0.0 and shift > 0))):
        raise EvaluationError("OU quadrature failed", nu=nu, w=w, power=power, shift=shift, value=total)
    # rounding of the exponent near the peak (about w^2/2 - shift) carries into the value
    log_peak = 0.5 * t_peak * t_peak + abs(q - 1.0) * math.log(t_peak)
    return total, e0 + e1 + e2 + (8.0 + 2.0 * (log_peak + abs(shift))) * _EPS * total


def _ou_slope(params):
    if params.kind.value != "OU":
        raise SpecfunDomainError("ou_psi requires an OU model")
    return params.rho / params.mu, math.sqrt(2.0 * params.mu) / params.sigma


def ou_psi(x, sign, params, shift=0.0):
    """OU fundamental solution at ``x``, optionally scaled by ``exp(-shift)``.

    ``sign=+1`` gives the increasing solution
    ``int_0^inf t^(rho/mu - 1) exp(-t^2/2 + k (x - L) t) dt`` with
    ``k = sqrt(2 mu)/sigma``; ``sign=-1`` flips the linear term.
    A nonzero long-run mean is handled by translating the state.  The
    scaling is applied inside the exponent, so ``shift`` extends the range
    beyond the overflow of ``exp(w^2/2)`` at about 37 stationary
    deviations from the mean.
    """
    nu, k = _ou_slope(params)
    w = sign * k * (x - params.L)
    v, e = _ou_integral(nu, w, 0, shift)
    return EvalResult(v, e)


def ou_psi_dx(x, sign, params, shift=0.0):
    """Derivative of :func:`ou_psi`, by differentiating under the integral."""
    nu, k = _ou_slope(params)
    w = sign * k * (x - params.L)
    v, e = _ou_integral(nu, w, 1, shift)
    return EvalResult(sign * k * v, k * e)
