"""Spread model: parameters, gain functions and the fundamental pair."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

from scipy.special import gammaln

from . import specfun
from .specfun import EvalResult

__all__ = [
    "ModelKind",
    "ModelParams",
    "ParameterError",
    "GainFunctions",
    "IgbmConstants",
    "FundamentalPair",
    "igbm_constants",
    "fundamental_pair",
    "generator_residual",
    "first_passage_laplace",
    "k0",
    "km1",
]


class ParameterError(ValueError):
    """Invalid model parameters or a call that does not fit the model kind."""


class ModelKind(str, enum.Enum):
    OU = "OU"
    IGBM = "IGBM"


@dataclass(frozen=True)
class ModelParams:
    """Diffusion ``dX = mu (L - X) dt + sigma(X) dW`` plus trading economics.

    ``sigma(x) = sigma`` for OU and ``sigma * x`` for IGBM.  ``lam`` is the
    inventory penalty rate and ``epsilon`` the fee paid on every trade.
    """

    kind: ModelKind
    mu: float
    L: float
    sigma: float
    rho: float
    lam: float
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        for name in ("mu", "L", "sigma", "rho", "lam", "epsilon"):
            val = getattr(self, name)
            if not isinstance(val, (int, float)) or not math.isfinite(val):
                raise ParameterError(f"{name} must be a finite number, got {val!r}")
            object.__setattr__(self, name, float(val))
        for name in ("mu", "sigma", "rho", "epsilon"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be > 0")
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if self.kind is ModelKind.IGBM and self.L <= 0:
            raise ParameterError("IGBM needs L > 0")

    @classmethod
    def ou(cls, mu, sigma, rho, lam, epsilon, L=0.0):
        return cls(ModelKind.OU, mu, L, sigma, rho, lam, epsilon)

    @classmethod
    def igbm(cls, mu, sigma, rho, lam, epsilon, L):
        return cls(ModelKind.IGBM, mu, L, sigma, rho, lam, epsilon)

    def replace(self, **changes):
        d = {k: getattr(self, k) for k in ("kind", "mu", "L", "sigma", "rho", "lam", "epsilon")}
        d.update(changes)
        return ModelParams(**d)

    @property
    def ell0(self):
        return self.lam + self.rho * self.epsilon

    @property
    def ell1(self):
        return self.lam - self.rho * self.epsilon

    @property
    def lam_over_rho(self):
        return self.lam / self.rho

    @property
    def domain_lower(self):
        """Left end of the state space: -inf for OU, 0 for IGBM."""
        return -math.inf if self.kind is ModelKind.OU else 0.0

    def sigma_at(self, x):
        return self.sigma if self.kind is ModelKind.OU else self.sigma * x

    def drift_at(self, x):
        return self.mu * (self.L - x)

    def working_domain(self):
        """Finite interval used for grids and scans."""
        if self.kind is ModelKind.OU:
            w = 10.0 * self.sigma / math.sqrt(2.0 * self.mu)
            return self.L - w, self.L + w
        return self.L * 1e-4, 10.0 * self.L


@dataclass(frozen=True)
class GainFunctions:
    """Switching gains: buying costs ``x + eps``, selling earns ``x - eps``."""

    epsilon: float

    def g01(self, x):
        return -(x + self.epsilon)

    gm10 = g01

    def g0m1(self, x):
        return x - self.epsilon

    g10 = g0m1

    def g(self, i, j, x):
        table = {(0, 1): self.g01, (-1, 0): self.gm10, (0, -1): self.g0m1, (1, 0): self.g10}
        try:
            return table[(i, j)](x)
        except KeyError:
            raise ValueError(f"no switch {i} -> {j}") from None


@dataclass(frozen=True)
class IgbmConstants:
    a: float
    b: float
    c: float


def igbm_constants(params):
    if params.kind is not ModelKind.IGBM:
        raise ParameterError("igbm_constants needs an IGBM model")
    mu, s2, rho = params.mu, params.sigma**2, params.rho
    a = (math.sqrt(s2 * s2 + 4.0 * (mu + 2.0 * rho) * s2 + 4.0 * mu * mu) - (2.0 * mu + s2)) / (2.0 * s2)
    b = 2.0 * mu / s2 + 2.0 * a + 2.0
    c = 2.0 * mu * params.L / s2
    return IgbmConstants(a, b, c)


class FundamentalPair:
    """Increasing (``plus``) and decreasing (``minus``) solutions of ``rho phi = L phi``.

    First derivatives are analytic; second derivatives come from the ODE
    itself, ``phi'' = 2 (rho phi - mu (L - x) phi') / sigma(x)^2``.

    ``minus_shift`` and ``plus_shift`` rescale the solutions to
    ``exp(-minus_shift) psi-`` and ``exp(-plus_shift) psi+``.  Any positive
    multiple is an equally valid fundamental solution.  Shifts are applied
    before exponentiation for ``psi-`` on ``(0, inf)`` (where it grows like
    ``e^(c/x)``) and for both OU solutions (which grow like ``e^(w^2/2)``),
    so they extend the range beyond double overflow; the IGBM ``psi+``
    grows only polynomially and its shift is a plain factor.
    """

    def __init__(self, params, minus_shift=0.0, plus_shift=0.0):
        self.params = params
        self.minus_shift = float(minus_shift)
        self.plus_shift = float(plus_shift)
        self.domain_lower = params.domain_lower
        if params.kind is ModelKind.IGBM:
            self.consts = igbm_constants(params)
        else:
            self.consts = None

    def __repr__(self):
        return (f"FundamentalPair({self.params!r}, minus_shift={self.minus_shift!r}, "
                f"plus_shift={self.plus_shift!r})")

    def _check(self, x):
        if not x > self.domain_lower:
            raise specfun.SpecfunDomainError(f"x={x} outside state space")

    # raw evaluators returning EvalResult ---------------------------------
    def plus_eval(self, x):
        self._check(x)
        if self.consts is None:
            return specfun.ou_psi(x, +1, self.params, self.plus_shift)
        a, b, c = self.consts.a, self.consts.b, self.consts.c
        # x^-a U(a,b,c/x) = c^-a * (z^a U)(c/x)
        r = specfun.tricomi_u_scaled(a, b, c / x)
        f = c ** (-a) * math.exp(-self.plus_shift)
        return EvalResult(f * r.value, f * r.abs_error_estimate)

    def minus_eval(self, x):
        self._check(x)
        if self.consts is None:
            return specfun.ou_psi(x, -1, self.params, self.minus_shift)
        a, b, c = self.consts.a, self.consts.b, self.consts.c
        r = specfun.kummer_m(a, b, c / x, shift=self.minus_shift)
        f = x ** (-a)
        return EvalResult(f * r.value, f * r.abs_error_estimate)

    def d_plus_eval(self, x):
        self._check(x)
        if self.consts is None:
            return specfun.ou_psi_dx(x, +1, self.params, self.plus_shift)
        a, b, c = self.consts.a, self.consts.b, self.consts.c
        # a x^-(a+1) (b-a-1) U(a+1,b,c/x) = a (b-a-1) c^-(a+1) (z^(a+1) U(a+1,b,z))
        r = specfun.tricomi_u_scaled(a + 1.0, b, c / x)
        f = a * (b - a - 1.0) * c ** (-a - 1.0) * math.exp(-self.plus_shift)
        return EvalResult(f * r.value, abs(f) * r.abs_error_estimate)

    def d_minus_eval(self, x):
        self._check(x)
        if self.consts is None:
            return specfun.ou_psi_dx(x, -1, self.params, self.minus_shift)
        a, b, c = self.consts.a, self.consts.b, self.consts.c
        z = c / x
        m0 = specfun.kummer_m(a, b, z, shift=self.minus_shift)
        m1 = specfun.kummer_m(a + 1.0, b + 1.0, z, shift=self.minus_shift)
        f = -a * x ** (-a - 2.0) / b
        val = f * (b * x * m0.value + c * m1.value)
        err = abs(f) * (b * x * m0.abs_error_estimate + c * m1.abs_error_estimate)
        return EvalResult(val, err)

    def representable_range(self):
        """Interval on which the shifted ``psi+`` and ``psi-`` stay below ``e^600``.

        OU: each end is where the growing solution on that side reaches the
        bound, located by bisection in ``x``.  IGBM: ``psi-`` grows like
        ``e^(c/x)`` towards 0 and ``psi+`` like ``x^(b-a-1)`` for large
        ``x``; both ends are located by bisection in ``log x``.
        """
        return _representable_range(self.params, self.minus_shift, self.plus_shift)

    def log_magnitude(self, x, which):
        """Approximate unshifted ``log psi(x)`` for ``which`` in ``{+1, -1}``.

        Good to a few units, which is all a choice of shift needs.  OU uses
        the Laplace approximation ``w^2/2 + (nu-1) log w + log sqrt(2 pi)``
        of the integral for ``w > 5``; IGBM ``psi-`` uses the leading term
        ``Gamma(b)/Gamma(a) e^z z^(a-b)`` of Kummer's function for
        ``z = c/x > 50``.
        """
        if self.consts is None:
            p = self.params
            nu = p.rho / p.mu
            w = which * math.sqrt(2.0 * p.mu) / p.sigma * (x - p.L)
            if w > 5.0:
                return 0.5 * w * w + (nu - 1.0) * math.log(w) + 0.5 * math.log(2.0 * math.pi)
            return math.log(specfun.ou_psi(x, which, p).value)
        if which > 0:
            return math.log(FundamentalPair(self.params).plus(x))
        a, b, c = self.consts.a, self.consts.b, self.consts.c
        z = c / x
        if z > 50.0:
            log_m = gammaln(b) - gammaln(a) + z + (a - b) * math.log(z)
        else:
            log_m = math.log(specfun.kummer_m(a, b, z).value)
        return log_m - a * math.log(x)

    def log_minus_magnitude(self, x):
        """Approximate unshifted ``log psi-(x)``; see :meth:`log_magnitude`."""
        return self.log_magnitude(x, -1)

    # plain floats -------------------------------------------------------
    def plus(self, x):
        return self.plus_eval(x).value

    def minus(self, x):
        return self.minus_eval(x).value

    def d_plus(self, x):
        return self.d_plus_eval(x).value

    def d_minus(self, x):
        return self.d_minus_eval(x).value

    def second_from_ode(self, x, phi, dphi):
        p = self.params
        s = p.sigma_at(x)
        return 2.0 * (p.rho * phi - p.drift_at(x) * dphi) / (s * s)

    def dd_plus(self, x):
        return self.second_from_ode(x, self.plus(x), self.d_plus(x))

    def dd_minus(self, x):
        return self.second_from_ode(x, self.minus(x), self.d_minus(x))

    def jet(self, x, which):
        """``(phi, phi', phi'')`` for ``which`` in ``{+1, -1}``."""
        if which > 0:
            f, df = self.plus(x), self.d_plus(x)
        else:
            f, df = self.minus(x), self.d_minus(x)
        return f, df, self.second_from_ode(x, f, df)


_MAX_LOG_PSI = 600.0


def _log_bisect(ok, lo, hi, tol=0.01):
    """Boundary between ``ok`` (at ``hi``) and not ``ok`` (at ``lo``) in log space."""
    while abs(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        if ok(math.exp(mid)):
            hi = mid
        else:
            lo = mid
    return math.exp(hi)


def _lin_bisect(ok, bad, good, tol):
    """Boundary between ``ok`` (at ``good``) and not ``ok`` (at ``bad``)."""
    while abs(good - bad) > tol:
        mid = 0.5 * (bad + good)
        if ok(mid):
            good = mid
        else:
            bad = mid
    return good


def _ou_range(params, minus_shift, plus_shift):
    sd = params.sigma / math.sqrt(2.0 * params.mu)
    L = params.L

    def ok(x, which, shift):
        try:
            v = specfun.ou_psi(x, which, params, shift).value
        except specfun.EvaluationError:
            return False
        return v == 0.0 or math.log(v) < _MAX_LOG_PSI

    def end(which, shift):
        # the unshifted solution overflows near 35 sd; a shift s moves that
        # to about sqrt(2 (600 + s)) sd
        reach = math.sqrt(2.0 * (_MAX_LOG_PSI + max(shift, 0.0))) + 10.0
        bad = L + which * reach * sd
        if ok(bad, which, shift):
            return bad
        return _lin_bisect(lambda x: ok(x, which, shift), bad, L, 0.01 * sd)

    return end(-1, minus_shift), end(+1, plus_shift)


@lru_cache(maxsize=1024)
def _representable_range(params, shift, plus_shift=0.0):
    if params.kind is ModelKind.OU:
        return _ou_range(params, shift, plus_shift)
    k = igbm_constants(params)

    def ok_minus(x):
        try:
            m = specfun.kummer_m(k.a, k.b, k.c / x, shift=shift).value
        except specfun.EvaluationError:
            return False
        if m == 0.0:
            # underflow under a large shift: tiny values are harmless
            return True
        return math.isfinite(m) and math.log(m) - k.a * math.log(x) < _MAX_LOG_PSI

    def ok_plus(x):
        try:
            u = specfun.tricomi_u_scaled(k.a, k.b, k.c / x).value
        except specfun.EvaluationError:
            return False
        return math.log(u) - k.a * math.log(k.c) < _MAX_LOG_PSI

    log_l = math.log(params.L)
    lo = math.exp(log_l - 40.0) if ok_minus(math.exp(log_l - 40.0)) else _log_bisect(ok_minus, log_l - 40.0, log_l)
    hi = math.exp(log_l + 40.0) if ok_plus(math.exp(log_l + 40.0)) else _log_bisect(ok_plus, log_l + 40.0, log_l)
    return lo, hi


def fundamental_pair(params):
    return FundamentalPair(params)


def generator_residual(phi, dphi, d2phi, x, params):
    """``rho phi - mu (L - x) phi' - sigma(x)^2 phi'' / 2`` at ``x``."""
    s = params.sigma_at(x)
    return params.rho * phi - params.drift_at(x) * dphi - 0.5 * s * s * d2phi


def first_passage_laplace(x, y, params, pair=None):
    """``E_x[exp(-rho tau_y)]`` for the first upward passage of ``y`` from ``x <= y``."""
    if x > y:
        raise ValueError(f"need x <= y, got x={x}, y={y}")
    if x == y:
        return 1.0
    pair = pair or FundamentalPair(params)
    return pair.plus(x) / pair.plus(y)


def _k_common(y, params):
    if params.kind is not ModelKind.IGBM:
        raise ParameterError("K0/K-1 are defined for the IGBM model only")
    if not y > 0:
        raise ValueError("need y > 0")
    a, b, c = (lambda k: (k.a, k.b, k.c))(igbm_constants(params))
    # (c/y)^-a / U(a,b,c/y) = 1 / (z^a U)(z) with z = c/y
    try:
        return 1.0 / specfun.tricomi_u_scaled(a, b, c / y).value
    except specfun.EvaluationError:
        # U beyond the double range: the ratio underflows to 0
        return 0.0


def k0(y, params):
    """``K_0(y)``; a positive value somewhere below the open-sell bound means
    the open-to-buy region is not empty."""
    r = _k_common(y, params)
    lr, eps = params.lam_over_rho, params.epsilon
    return r * (y - eps + lr) - (lr + eps)


def km1(y, params):
    """``K_{-1}(y)``; a positive value for some ``y > 0`` means the
    buy-to-close region is not empty."""
    r = _k_common(y, params)
    lr, eps = params.lam_over_rho, params.epsilon
    return r * (y - eps - lr) + (lr - eps)
