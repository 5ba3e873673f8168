"""Cutoff solver: case classification and the smooth-fit systems.

The smooth-fit conditions split into two independent problems, one per
side of the book:

* buy side: open-to-buy edge ``y`` and sell-to-close edge ``x1``,
  unknown coefficients ``D = A1 - A0`` and ``B0``;
* sell side: open-to-sell edge ``z`` and buy-to-close edge ``w``,
  unknown coefficients ``E = B-1 - B0`` and ``A0``.

Both are written in a coordinate ``u`` in which the "growing" solution
increases (``u = x`` on the buy side, ``u = -x`` on the sell side), where
they take the common form

    H(u) = P grow(u) - Q decay(u) - lam/rho - u,
    H(e) = +eps, H'(e) = 0,   H(m) = -eps, H'(m) = 0,   e < m.

``e`` is found by shooting: for a trial ``e`` the two conditions at ``e``
fix ``(P, Q)`` linearly and ``phi(e) = min_{u > e} H(u) + eps`` is
evaluated; its root is bracketed and refined by Brent's method, then the
full 4x4 system is polished by damped Newton.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .model import FundamentalPair, ModelKind, ModelParams, igbm_constants, k0, km1

__all__ = [
    "Case",
    "CutoffSet",
    "Coefficients",
    "SolveReport",
    "SolverError",
    "SingularityError",
    "ClassificationError",
    "inclusion_bounds",
    "classify_case",
    "solve",
    "solve_case1",
    "solve_case2ii",
    "solve_case2iii",
    "check_nonsingular",
]

log = logging.getLogger(__name__)

ROOT_TOL = 1e-12
SMOOTH_FIT_TOL = 1e-9


class SolverError(RuntimeError):
    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class SingularityError(SolverError):
    pass


class ClassificationError(SolverError):
    pass


class Case(str, enum.Enum):
    CASE1 = "Case1"
    CASE2I = "Case2i"
    CASE2II = "Case2ii"
    CASE2III = "Case2iii"


@dataclass(frozen=True)
class CutoffSet:
    """Region edges in spread coordinates.

    ``open_buy`` is the upper edge of the open-to-buy region and
    ``close_buy`` the upper edge of the buy-to-close region; either is
    ``None`` when that region is empty.  ``close_sell`` and ``open_sell``
    are the lower edges of the sell-to-close and open-to-sell regions.
    ``close_sell`` equals the domain's lower end when selling is optimal
    everywhere.
    """

    case_tag: Case
    open_buy: float | None
    close_buy: float | None
    close_sell: float
    open_sell: float

    # threshold symbols: S01 = (l, -x01], S-1 = (l, -x-1], S1 = [x1, inf), S0-1 = [x0-1, inf)
    @property
    def xbar_01(self):
        return None if self.open_buy is None else -self.open_buy

    @property
    def xbar_m1(self):
        return None if self.close_buy is None else -self.close_buy

    @property
    def xbar_1(self):
        return self.close_sell

    @property
    def xbar_0m1(self):
        return self.open_sell

    def edges(self):
        return {
            "open_buy": self.open_buy,
            "close_buy": self.close_buy,
            "close_sell": self.close_sell,
            "open_sell": self.open_sell,
        }

    def shifted(self, dx):
        sh = lambda v: None if v is None else v + dx
        return replace(self, open_buy=sh(self.open_buy), close_buy=sh(self.close_buy),
                       close_sell=self.close_sell + dx, open_sell=self.open_sell + dx)

    def ordering_violations(self, params=None):
        """List of violated structural inequalities (empty when consistent)."""
        out = []
        ob, cb, cs, os_ = self.open_buy, self.close_buy, self.close_sell, self.open_sell
        # the non-strict inequalities hold with equality when lam = 0; allow rounding
        rt = 1e-12 * (1.0 + max(abs(e) for e in self.edges().values() if e is not None))
        if not cs <= os_ + rt:
            out.append("close_sell <= open_sell")
        if ob is not None and not ob < cs:
            out.append("open_buy < close_sell")
        if cb is not None and not cb < os_:
            out.append("close_buy < open_sell")
        if ob is not None and cb is not None and not ob <= cb + rt:
            out.append("open_buy <= close_buy")
        if ob is not None and cb is None:
            out.append("open-to-buy present without buy-to-close")
        if self.case_tag is Case.CASE2II and ob is not None:
            out.append("Case2ii has no open-to-buy region")
        if self.case_tag is Case.CASE2III and (ob is not None or cb is not None):
            out.append("Case2iii has no buy-side regions")
        if params is not None:
            b_ob, b_os, b_cs, b_cb = inclusion_bounds(params)
            slack = 1e-9 * (1.0 + abs(params.L))
            if os_ < b_os - slack:
                out.append("open_sell >= (mu L + l0)/(rho + mu)")
            if cs > params.domain_lower and cs < b_cs - slack:
                out.append("close_sell >= (mu L - l1)/(rho + mu)")
            if cb is not None and cb > b_cb + slack:
                out.append("close_buy <= (mu L + l1)/(rho + mu)")
            if ob is not None and ob > b_ob + slack:
                out.append("open_buy <= (mu L - l0)/(rho + mu)")
        return out


@dataclass(frozen=True)
class Coefficients:
    """Weights of psi+/psi- in the piecewise value functions; ``None`` when unused.

    Each weight multiplies a rescaled solution: ``A0`` and ``A1`` multiply
    ``exp(-a0_shift) psi+`` and ``exp(-a1_shift) psi+``, ``B0`` and ``Bm1``
    multiply ``exp(-b0_shift) psi-`` and ``exp(-bm1_shift) psi-`` (see
    :class:`~pairswitch.model.FundamentalPair`).  The shifts are zero unless
    an edge lies where the unscaled solutions leave the double range; they
    may differ because the buy-side and sell-side edges can be far apart.
    """

    A0: float | None = None
    B0: float | None = None
    A1: float | None = None
    Bm1: float | None = None
    b0_shift: float = 0.0
    bm1_shift: float = 0.0
    a0_shift: float = 0.0
    a1_shift: float = 0.0

    def as_dict(self):
        return {"A0": self.A0, "B0": self.B0, "A1": self.A1, "Bm1": self.Bm1,
                "a0_shift": self.a0_shift, "b0_shift": self.b0_shift,
                "a1_shift": self.a1_shift, "bm1_shift": self.bm1_shift}

    def pairs(self, params):
        """Pairs carrying the scales of ``(A0, B0, A1, Bm1)``, in that order."""
        return (FundamentalPair(params, plus_shift=self.a0_shift),
                FundamentalPair(params, minus_shift=self.b0_shift),
                FundamentalPair(params, plus_shift=self.a1_shift),
                FundamentalPair(params, minus_shift=self.bm1_shift))


@dataclass
class SolveReport:
    cutoffs: CutoffSet
    coeffs: Coefficients
    params: ModelParams
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    condition_estimates: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def max_residual(self):
        return max((abs(v) for v in self.residuals.values()), default=0.0)


def inclusion_bounds(params):
    """Bounds on the region edges implied by the generator applied to the gains.

    Returns ``(open_buy_max, open_sell_min, close_sell_min, close_buy_max)``
    i.e. ``((mu L - l0), (mu L + l0), (mu L - l1), (mu L + l1)) / (rho + mu)``.
    """
    mL, d = params.mu * params.L, params.rho + params.mu
    l0, l1 = params.ell0, params.ell1
    return (mL - l0) / d, (mL + l0) / d, (mL - l1) / d, (mL + l1) / d


# ---------------------------------------------------------------------------
# one side of the book in reflected coordinates
# ---------------------------------------------------------------------------

class _Side:
    def __init__(self, pair, flip):
        self.pair = pair
        self.flip = flip
        p = pair.params
        self.lr = p.lam_over_rho
        self.eps = p.epsilon
        lo, hi = p.working_domain()
        if p.kind is ModelKind.IGBM:
            lo, top = pair.representable_range()
            hi = min(max(hi, 50.0 * (p.mu * p.L + p.ell0) / (p.rho + p.mu)), top)
        elif pair.minus_shift == 0.0 and pair.plus_shift == 0.0:
            # +-30 stationary deviations; psi overflows near 35
            w = hi - p.L
            lo, hi = p.L - 3.0 * w, p.L + 3.0 * w
        else:
            lo, hi = pair.representable_range()
        self.x_lo, self.x_hi = lo, hi
        # u-range
        self.u_lo, self.u_hi = (-hi, -lo) if flip else (lo, hi)
        self.scale = (p.sigma / math.sqrt(2.0 * p.mu)) if p.kind is ModelKind.OU else max(p.L, 1e-3)
        # set when a search stops at the lower end of the u-range
        self.at_lower_limit = False
        # scales of the growing and decaying solution in this side's pair
        self.grow_shift = pair.minus_shift if flip else pair.plus_shift
        self.decay_shift = pair.plus_shift if flip else pair.minus_shift

    def to_x(self, u):
        return -u if self.flip else u

    def grow(self, u):
        """(g, g', g'') at u."""
        if self.flip:
            f, df, ddf = self.pair.jet(-u, -1)
            return f, -df, ddf
        return self.pair.jet(u, +1)

    def decay(self, u):
        if self.flip:
            f, df, ddf = self.pair.jet(-u, +1)
            return f, -df, ddf
        return self.pair.jet(u, -1)

    def grow1(self, u):
        if self.flip:
            x = -u
            return self.pair.minus(x), -self.pair.d_minus(x)
        return self.pair.plus(u), self.pair.d_plus(u)

    def decay1(self, u):
        if self.flip:
            x = -u
            return self.pair.plus(x), -self.pair.d_plus(x)
        return self.pair.minus(u), self.pair.d_minus(u)

    # -- coefficients from the two conditions at the open edge
    def coeffs_at(self, e):
        g, dg = self.grow1(e)
        d, dd = self.decay1(e)
        det = -g * dd + d * dg  # Wronskian-type, > 0
        if not (det > 0.0 and math.isfinite(det)):
            # a solution under- or overflows at e under this pair's scales
            raise _ScaleOutOfRange()
        r1, r2 = self.lr + e + self.eps, 1.0
        P = (-dd * r1 + d * r2) / det
        Q = (-dg * r1 + g * r2) / det
        return P, Q

    def H(self, u, P, Q):
        g, _ = self.grow1(u)
        d, _ = self.decay1(u)
        return P * g - Q * d - self.lr - u

    def dH(self, u, P, Q):
        _, dg = self.grow1(u)
        _, dd = self.decay1(u)
        return P * dg - Q * dd - 1.0

    def d2H(self, u, P, Q):
        g = self.grow(u)[2]
        d = self.decay(u)[2]
        return P * g - Q * d

    def local_min_after(self, e, P, Q):
        """First local minimum of H to the right of e (or the right end)."""
        if self.d2H(e, P, Q) >= 0.0:
            return e, self.H(e, P, Q)
        # dH(e) = 0 only up to rounding: start the bracket at a point just
        # right of e where dH is strictly negative
        step = 1e-3 * self.scale
        while self.dH(min(e + step, self.u_hi), P, Q) >= 0.0:
            step *= 0.5
            if step < 1e-13 * self.scale:
                return e, self.H(e, P, Q)
        prev = min(e + step, self.u_hi)
        if prev >= self.u_hi:
            return prev, self.H(prev, P, Q)
        step *= 2.0
        while True:
            u = min(e + step, self.u_hi)
            if self.dH(u, P, Q) > 0.0:
                m = brentq(self.dH, prev, u, args=(P, Q), xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
                return m, self.H(m, P, Q)
            if u >= self.u_hi:
                return u, self.H(u, P, Q)
            prev = u
            step *= 1.6

    def shoot(self, e):
        P, Q = self.coeffs_at(e)
        m, h = self.local_min_after(e, P, Q)
        return h + self.eps, (P, Q, m)

    def find_edge(self, e_hi):
        """Root of the shooting function below ``e_hi``; ``None`` if none exists in the domain."""
        e_hi = min(e_hi, self.u_hi)
        e_lo_limit = self.u_lo
        if e_hi <= e_lo_limit:
            return None
        f_hi, _ = self.shoot(e_hi)
        if f_hi <= 0.0:
            # the open edge must lie below the bound; a non-positive value here is degenerate
            log.debug("shooting function non-positive at bound: %g", f_hi)
            return None
        a, fa = e_hi, f_hi
        k = 0
        while True:
            if self.pair.params.kind is ModelKind.IGBM and not self.flip:
                # buy side lives on (0, e_hi]: move geometrically toward 0
                b = max(e_hi * 0.5 ** (k + 1), e_lo_limit)
            else:
                b = max(e_hi - self.scale * 0.05 * (2.0 ** k), e_lo_limit)
            fb, _ = self.shoot(b)
            if fb <= 0.0:
                break
            a, fa = b, fb
            if b <= e_lo_limit:
                self.at_lower_limit = True
                return None
            k += 1
            if k > 80:
                return None
        root = brentq(lambda e: self.shoot(e)[0], b, a, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=300)
        return root

    def tangent_partner(self, e, Q):
        """Partner edge when the growing weight ``P`` is negligible at ``e``.

        With ``e`` and ``Q`` held fixed, eliminating ``P`` from
        ``H(m) = -eps`` and ``H'(m) = 0`` leaves the scalar equation
        ``g'(m) (Q d(m) + lam/rho + m - eps) - g(m) (Q d'(m) + 1) = 0``.
        Returns ``(P, m)`` for its first root right of ``e`` at which ``H``
        first touches ``-eps``, or ``None``.
        """
        lr, eps = self.lr, self.eps

        def f(u):
            g, dg = self.grow1(u)
            d, dd = self.decay1(u)
            return dg * (Q * d + lr + u - eps) - g * (Q * dd + 1.0)

        us = np.linspace(e, self.u_hi, 401)[1:]
        prev_u, prev_f = us[0], f(us[0])
        for u in us[1:]:
            fu = f(u)
            if np.sign(fu) != np.sign(prev_f):
                m = brentq(f, prev_u, u, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=300)
                g, dg = self.grow1(m)
                d, dd = self.decay1(m)
                P = (Q * dd + 1.0) / dg
                if not P > 0.0:
                    return None
                m_check, _ = self.local_min_after(e, P, Q)
                if not abs(m_check - m) <= 1e-6 * (1.0 + abs(m)):
                    return None
                return P, m
            prev_u, prev_f = u, fu
        return None

    def newton_polish(self, P, Q, e, m, maxiter=30):
        """Damped Newton on the four smooth-fit equations."""
        lr, eps = self.lr, self.eps

        def F(v):
            P, Q, e, m = v
            ge, dge = self.grow1(e)
            de, dde = self.decay1(e)
            gm, dgm = self.grow1(m)
            dm, ddm = self.decay1(m)
            return np.array([
                P * ge - Q * de - (lr + e + eps),
                P * dge - Q * dde - 1.0,
                P * gm - Q * dm - (lr + m - eps),
                P * dgm - Q * ddm - 1.0,
            ])

        def J(v):
            P, Q, e, m = v
            ge, dge, ddge = self.grow(e)
            de, dde, ddde = self.decay(e)
            gm, dgm, ddgm = self.grow(m)
            dm, ddm, dddm = self.decay(m)
            return np.array([
                [ge, -de, P * dge - Q * dde - 1.0, 0.0],
                [dge, -dde, P * ddge - Q * ddde, 0.0],
                [gm, -dm, 0.0, P * dgm - Q * ddm - 1.0],
                [dgm, -ddm, 0.0, P * ddgm - Q * dddm],
            ])

        v = np.array([P, Q, e, m], dtype=float)
        f = F(v)
        it = 0
        for it in range(1, maxiter + 1):
            if np.max(np.abs(f)) < ROOT_TOL:
                break
            step = np.linalg.solve(J(v), -f)
            t = 1.0
            while True:
                cand = v + t * step
                inside = all(self.u_lo < w < self.u_hi for w in cand[2:])
                fc = F(cand) if inside else np.full(4, np.inf)
                if np.max(np.abs(fc)) < np.max(np.abs(f)) or t < 1e-6:
                    break
                t *= 0.5
            if np.max(np.abs(fc)) >= np.max(np.abs(f)):
                break
            v, f = cand, fc
        return v, f, it


class _ScaleOutOfRange(Exception):
    """The solutions of a side are not both representable at a trial edge."""


class _PartnerOutOfRange(Exception):
    """The partner edge lies beyond the range of the side's growing solution."""


# shift added to the growing solution each time a partner edge falls out of range
_GROW_SHIFT_STEP = 600.0
_GROW_SHIFT_ATTEMPTS = 3
# the deep searches give up once c/x exceeds this (IGBM buy side) or the
# trial edge is this many stationary deviations from L (OU)
_DEEP_MAX_Z = 1e7
_DEEP_MAX_SD = 1000.0
# decay shifts of the deep search are quantised to multiples of this
_DEEP_SHIFT_QUANTUM = 50.0


def _side_pair(params, flip, grow_shift=0.0, decay_shift=0.0):
    if flip:
        return FundamentalPair(params, minus_shift=grow_shift, plus_shift=decay_shift)
    return FundamentalPair(params, minus_shift=decay_shift, plus_shift=grow_shift)


def _grow_shift_helps(params, flip):
    # psi+ on (0, inf) grows polynomially; its range does not depend on a shift
    return params.kind is ModelKind.OU or flip


def _deep_supported(params, flip):
    # on (0, inf) only psi- (decaying on the buy side) leaves the double range
    return params.kind is ModelKind.OU or not flip


def _finish_side(side, e):
    """Partner edge, coefficients and Newton polish for a shooting root ``e``."""
    P, Q = side.coeffs_at(e)
    m, h = side.local_min_after(e, P, Q)
    if not abs(h + side.eps) <= 1e-6 * (1.0 + side.eps + abs(m)):
        # Brent stopped at a jump of the shooting function, not a root: the
        # growing weight changes sign at e and the partner is set by tangency
        tp = side.tangent_partner(e, Q)
        if tp is None:
            # the tangency may lie beyond the range of the growing solution
            if _grow_shift_helps(side.pair.params, side.flip):
                raise _PartnerOutOfRange()
            return None
        P, m = tp
    if not m < side.u_hi:
        # H keeps decreasing up to the end of the range: either the growing
        # solution needs a larger shift or there is no partner edge
        if _grow_shift_helps(side.pair.params, side.flip):
            raise _PartnerOutOfRange()
        return None
    v, f, it = side.newton_polish(P, Q, e, m)
    P, Q, e, m = (float(t) for t in v)
    return {"P": P, "Q": Q, "edge": side.to_x(e), "partner": side.to_x(m), "residual": f,
            "iterations": it, "grow_shift": side.grow_shift, "decay_shift": side.decay_shift}


def _deep_side(params, flip, u_top, grow_shift):
    """Shooting root below ``u_top``, the end of the unshifted search range.

    The shooting function is scale free, so each evaluation uses a pair
    whose decaying solution is shifted by (a quantised) ``log`` of its
    magnitude at the trial edge.  The root is bracketed by halving ``x``
    (IGBM buy side) or by doubling steps in stationary deviations (OU) and
    refined by Brent.  Returns the side result or ``None``.
    """
    base = FundamentalPair(params)
    which = +1 if flip else -1
    sides = {}
    igbm = params.kind is ModelKind.IGBM

    def side_for(u):
        x = -u if flip else u
        k = max(0.0, _DEEP_SHIFT_QUANTUM * math.floor(base.log_magnitude(x, which) / _DEEP_SHIFT_QUANTUM))
        if k not in sides:
            sides[k] = _Side(_side_pair(params, flip, grow_shift, k), flip)
        return sides[k]

    # search variable t: log x on (0, inf), u itself for OU
    to_u = math.exp if igbm else (lambda t: t)

    def phi(t):
        u = to_u(t)
        return side_for(u).shoot(u)[0]

    if igbm:
        c = base.consts.c
        t_hi = math.log(u_top)
        step = lambda k: math.log(2.0)
        beyond = lambda t: c / math.exp(t) > _DEEP_MAX_Z
    else:
        sd = params.sigma / math.sqrt(2.0 * params.mu)
        # u - L (buy side) or -u - L ... measured as distance from the mean in u
        centre = -params.L if flip else params.L
        t_hi = u_top
        step = lambda k: sd * 2.0 ** k
        beyond = lambda t: (centre - t) / sd > _DEEP_MAX_SD
    if not phi(t_hi) > 0.0:
        return None
    k = 0
    while True:
        t_lo = t_hi - step(k)
        if beyond(t_lo):
            return None
        if phi(t_lo) <= 0.0:
            break
        t_hi = t_lo
        k += 1
    t = brentq(phi, t_lo, t_hi, xtol=1e-14 if igbm else 1e-13 * max(1.0, abs(t_lo)),
               rtol=4 * np.finfo(float).eps, maxiter=300)
    e = to_u(t)
    return _finish_side(side_for(e), e)


def _solve_side(params, flip):
    """Open edge, partner and coefficients of one side, with adaptive scales.

    The search first runs with unshifted solutions.  When it stops at the
    lower end of the range it continues with per-evaluation shifts of the
    decaying solution; when the partner edge falls beyond the range of the
    growing solution the whole search is repeated with that solution
    shifted further.  Returns the side result (see :func:`_finish_side`)
    or ``None`` when no root exists.
    """
    b = inclusion_bounds(params)
    e_hi = -b[1] if flip else b[0]
    grow_shift = 0.0
    for _ in range(_GROW_SHIFT_ATTEMPTS):
        side = _Side(_side_pair(params, flip, grow_shift), flip)
        try:
            e = side.find_edge(e_hi)
            if e is not None:
                return _finish_side(side, e)
            if side.at_lower_limit and _deep_supported(params, flip):
                log.debug("edge search reached the end of the unshifted range; searching deeper")
                return _deep_side(params, flip, side.u_lo, grow_shift)
            return None
        except _PartnerOutOfRange:
            log.debug("partner beyond the range with grow shift %g", grow_shift)
            grow_shift += _GROW_SHIFT_STEP
        except _ScaleOutOfRange:
            # edge and partner need more than the double range between them
            log.debug("no usable scale with grow shift %g", grow_shift)
            return None
    return None


# ---------------------------------------------------------------------------
# scalar equations used when buy-side regions are empty
# ---------------------------------------------------------------------------

def _scalar_root(f, x_lo, x_hi, n=80):
    """First sign change of f on a geometric grid over [x_lo, x_hi], refined by Brent."""
    xs = np.geomspace(x_lo, x_hi, n) if x_lo > 0 else np.linspace(x_lo, x_hi, n)
    prev_x, prev_f = xs[0], f(xs[0])
    for x in xs[1:]:
        fx = f(x)
        if prev_f == 0.0:
            return prev_x, prev_f, fx
        if np.sign(fx) != np.sign(prev_f):
            r = brentq(f, prev_x, x, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=300)
            return r, prev_f, fx
        prev_x, prev_f = x, fx
    return None, prev_f, None


def _close_sell_scalar(pair):
    """Root of (-lam/rho - (x - eps)) psi+'(x) + psi+(x) = 0; None when it is <= lower end."""
    p = pair.params
    lr, eps = p.lam_over_rho, p.epsilon

    def f(x):
        return (-lr - (x - eps)) * pair.d_plus(x) + pair.plus(x)

    x_lo = p.L * 1e-6
    x_hi = min(10.0 * max(inclusion_bounds(p)[1], p.L), pair.representable_range()[1])
    root, f_lo, _ = _scalar_root(f, x_lo, x_hi, n=120)
    return root, f, f_lo


def _open_sell_scalar(pair):
    """Root of (lam/rho - (z - eps)) psi+'(z) + psi+(z) = 0 above the open-sell bound."""
    p = pair.params
    lr, eps = p.lam_over_rho, p.epsilon

    def f(z):
        return (lr - (z - eps)) * pair.d_plus(z) + pair.plus(z)

    z_lo = max(inclusion_bounds(p)[1], p.L * 1e-6)
    z_hi = min(50.0 * z_lo + 10.0 * p.L, pair.representable_range()[1])
    if not z_hi > z_lo:
        return None, f
    root, _, _ = _scalar_root(f, z_lo, z_hi, n=160)
    return root, f


# ---------------------------------------------------------------------------
# residual bookkeeping
# ---------------------------------------------------------------------------

def smooth_fit_equations(cutoffs, coeffs, pair):
    """Residuals of the smooth-fit conditions, keyed by boundary and kind.

    ``pair`` supplies the model; the scales of the solutions come from ``coeffs``.
    """
    p = pair.params
    pA0, pB0, pA1, pBm1 = coeffs.pairs(p)
    lr = p.lam_over_rho
    eps = p.epsilon
    A0 = coeffs.A0 or 0.0
    B0 = coeffs.B0 or 0.0
    A1 = coeffs.A1 or 0.0
    Bm1 = coeffs.Bm1 or 0.0
    res = {}

    def mid(x):
        v = (A0 * pA0.plus(x) if A0 else 0.0) + (B0 * pB0.minus(x) if B0 else 0.0)
        dv = (A0 * pA0.d_plus(x) if A0 else 0.0) + (B0 * pB0.d_minus(x) if B0 else 0.0)
        return v, dv

    def right(x):
        v = (Bm1 * pBm1.minus(x) if Bm1 else 0.0) - lr
        dv = Bm1 * pBm1.d_minus(x) if Bm1 else 0.0
        return v, dv

    ob, cb, cs, os_ = cutoffs.open_buy, cutoffs.close_buy, cutoffs.close_sell, cutoffs.open_sell
    if ob is not None:
        m, dm = mid(ob)
        res["open_buy/value"] = A1 * pA1.plus(ob) - lr - (ob + eps) - m
        res["open_buy/slope"] = A1 * pA1.d_plus(ob) - 1.0 - dm
    m, dm = mid(os_)
    r, dr = right(os_)
    res["open_sell/value"] = r + (os_ - eps) - m
    res["open_sell/slope"] = dr + 1.0 - dm
    if cs > p.domain_lower:
        m, dm = mid(cs)
        res["close_sell/value"] = (A1 * pA1.plus(cs) if A1 else 0.0) - lr - (m + cs - eps)
        res["close_sell/slope"] = (A1 * pA1.d_plus(cs) if A1 else 0.0) - (dm + 1.0)
    if cb is not None:
        m, dm = mid(cb)
        r, dr = right(cb)
        res["close_buy/value"] = r - (m - (cb + eps))
        res["close_buy/slope"] = dr - (dm - 1.0)
    return res


def check_nonsingular(cutoffs, pair, sell_pair=None):
    """Determinants of the value and slope matrices via their two-factor forms.

    ``pair`` evaluates the solutions at the buy-side edges and
    ``sell_pair`` (default ``pair``) at the sell-side ones; positive
    rescalings of rows and columns do not change the sign of either
    factor.  Returns a dict with both factors of each determinant and the
    condition numbers of the assembled 4x4 matrices.  Raises
    :class:`SingularityError` if a factor vanishes.
    """
    sell_pair = pair if sell_pair is None else sell_pair
    if cutoffs.open_buy is None or cutoffs.close_buy is None:
        raise ValueError("check_nonsingular needs all four cutoffs")
    y, x1, z, w = cutoffs.open_buy, cutoffs.close_sell, cutoffs.open_sell, cutoffs.close_buy
    P0, M0, P, M = pair.plus, pair.minus, sell_pair.plus, sell_pair.minus
    dP0, dM0, dP, dM = pair.d_plus, pair.d_minus, sell_pair.d_plus, sell_pair.d_minus
    f1 = M0(y) * P0(x1) - M0(x1) * P0(y)
    f2 = M(z) * P(w) - M(w) * P(z)
    g1 = dM0(y) * dP0(x1) - dM0(x1) * dP0(y)
    g2 = dM(z) * dP(w) - dM(w) * dP(z)
    mat = np.array([
        [P0(y), 0.0, 0.0, -M0(y)],
        [0.0, M(z), -P(z), 0.0],
        [P0(x1), 0.0, 0.0, -M0(x1)],
        [0.0, M(w), -P(w), 0.0],
    ])
    matx = np.array([
        [dP0(y), 0.0, 0.0, -dM0(y)],
        [0.0, dM(z), -dP(z), 0.0],
        [dP0(x1), 0.0, 0.0, -dM0(x1)],
        [0.0, dM(w), -dP(w), 0.0],
    ])
    out = {
        "det_M": f1 * f2,
        "det_M_factors": (f1, f2),
        "det_Mx": g1 * g2,
        "det_Mx_factors": (g1, g2),
        "cond_M": float(np.linalg.cond(mat)),
        "cond_Mx": float(np.linalg.cond(matx)),
        "det_M_direct": float(np.linalg.det(mat)),
        "det_Mx_direct": float(np.linalg.det(matx)),
    }
    if f1 == 0.0 or f2 == 0.0 or g1 == 0.0 or g2 == 0.0:
        raise SingularityError("smooth-fit matrix is singular", **out)
    return out


def _finish(params, pair, cutoffs, coeffs, iterations, diagnostics):
    res = smooth_fit_equations(cutoffs, coeffs, pair)
    cond = {}
    if cutoffs.open_buy is not None and cutoffs.close_buy is not None:
        c = coeffs
        cond = check_nonsingular(cutoffs, FundamentalPair(params, minus_shift=c.b0_shift, plus_shift=c.a1_shift),
                                 FundamentalPair(params, minus_shift=c.bm1_shift, plus_shift=c.a0_shift))
    rep = SolveReport(cutoffs, coeffs, params, res, iterations, cond, diagnostics)
    scale = 1.0 + params.lam_over_rho + max(abs(v) for v in cutoffs.edges().values() if v is not None)
    bad = {k: v for k, v in res.items() if not abs(v) <= SMOOTH_FIT_TOL * scale}
    if bad:
        raise SolverError("smooth-fit residuals above tolerance", residuals=res, cutoffs=cutoffs)
    return rep


# ---------------------------------------------------------------------------
# case solvers
# ---------------------------------------------------------------------------

def _rescale(value, shift_from, shift_to):
    """``value`` on the scale ``exp(-shift_from)`` re-expressed on ``exp(-shift_to)``."""
    try:
        return value * math.exp(shift_to - shift_from)
    except OverflowError:
        raise SolverError("coefficient scales too far apart", shift_from=shift_from, shift_to=shift_to) from None


def solve_case1(params, case_tag=None):
    """Solve the two decoupled four-equation systems (all four regions present)."""
    buy = _solve_side(params, False)
    sell = _solve_side(params, True)
    if buy is None or sell is None:
        raise SolverError("no admissible root for the four-region system",
                          buy_found=buy is not None, sell_found=sell is not None)
    D, B0 = buy["P"], buy["Q"]
    E, A0 = sell["P"], sell["Q"]
    # A1 = D + A0 on the scale of D, Bm1 = E + B0 on the scale of E
    coeffs = Coefficients(A0=A0, B0=B0,
                          A1=D + _rescale(A0, sell["decay_shift"], buy["grow_shift"]),
                          Bm1=E + _rescale(B0, buy["decay_shift"], sell["grow_shift"]),
                          b0_shift=buy["decay_shift"], bm1_shift=sell["grow_shift"],
                          a0_shift=sell["decay_shift"], a1_shift=buy["grow_shift"])
    tag = case_tag or (Case.CASE1 if params.kind is ModelKind.OU else Case.CASE2I)
    cut = CutoffSet(tag, open_buy=buy["edge"], close_buy=sell["partner"],
                    close_sell=buy["partner"], open_sell=sell["edge"])
    if params.kind is ModelKind.IGBM and (cut.open_buy <= 0 or cut.close_buy <= 0):
        raise SolverError("four-region root lies outside (0, inf)", cutoffs=cut)
    return _finish(params, FundamentalPair(params), cut, coeffs, buy["iterations"] + sell["iterations"],
                   {"buy_side_residual": buy["residual"], "sell_side_residual": sell["residual"]})


def solve_case2ii(params):
    """Open-to-buy region empty: sell-side system plus the scalar close-sell equation."""
    if params.kind is not ModelKind.IGBM:
        raise SolverError("Case2ii only arises on (0, inf)")
    sell = _solve_side(params, True)
    pair = FundamentalPair(params)
    if sell is None or not sell["partner"] > 0:
        raise SolverError("no buy-to-close edge in (0, inf)", sell=sell)
    E, A0 = sell["P"], sell["Q"]
    x1, _, f0 = _close_sell_scalar(pair)
    if x1 is None:
        if f0 < 0:
            # selling from the long position is optimal everywhere
            close_sell, A1 = 0.0, None
        else:
            raise SolverError("close-sell equation has no root")
    else:
        close_sell = x1
        A1 = _rescale(A0, sell["decay_shift"], 0.0) + 1.0 / pair.d_plus(x1)
    coeffs = Coefficients(A0=A0, B0=None, A1=A1, Bm1=E, bm1_shift=sell["grow_shift"],
                          a0_shift=sell["decay_shift"])
    cut = CutoffSet(Case.CASE2II, open_buy=None, close_buy=sell["partner"],
                    close_sell=close_sell, open_sell=sell["edge"])
    return _finish(params, pair, cut, coeffs, sell["iterations"],
                   {"sell_side_residual": sell["residual"], "raw_close_sell": x1})


def solve_case2iii(params):
    """Both buy-side regions empty: two scalar equations."""
    if params.kind is not ModelKind.IGBM:
        raise SolverError("Case2iii only arises on (0, inf)")
    pair = FundamentalPair(params)
    z, _ = _open_sell_scalar(pair)
    if z is None:
        raise SolverError("open-sell equation has no root")
    A0 = 1.0 / pair.d_plus(z)
    x1, _, f0 = _close_sell_scalar(pair)
    if x1 is None or x1 <= 0:
        raise SolverError("close-sell equation has no positive root", f_at_lower=f0)
    A1 = A0 + 1.0 / pair.d_plus(x1)
    coeffs = Coefficients(A0=A0, B0=None, A1=A1, Bm1=None)
    cut = CutoffSet(Case.CASE2III, open_buy=None, close_buy=None, close_sell=x1, open_sell=z)
    return _finish(params, pair, cut, coeffs, 0, {})


_CASE_SOLVERS = {
    Case.CASE1: solve_case1,
    Case.CASE2I: lambda p: solve_case1(p, Case.CASE2I),
    Case.CASE2II: solve_case2ii,
    Case.CASE2III: solve_case2iii,
}


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def _k_scan(params, n=200):
    b_os = inclusion_bounds(params)[1]
    ys0 = np.geomspace(params.L * 1e-4, b_os, n + 1)[:-1]
    k0_max = max(k0(float(y), params) for y in ys0)
    lo, hi = params.working_domain()
    ys1 = np.geomspace(lo, hi, n)
    km1_max = max(km1(float(y), params) for y in ys1)
    return k0_max, km1_max


def _tol_le(a, b):
    return a <= b + 1e-12 * max(1.0, abs(a), abs(b))


def classify_case(params, verify=True):
    """Decide which structure of switching regions applies.

    Returns ``(case, diagnostics)``.  Sufficient conditions are tried first
    (state space, the small-L emptiness criteria, positivity of K0 and
    K-1); otherwise candidate cases are solved in turn, from four regions
    down to two, and the first one whose value functions satisfy the
    variational inequalities is accepted.
    """
    diag = {}
    if params.kind is ModelKind.OU:
        diag["reason"] = "state space is the real line"
        return Case.CASE1, diag
    l0, l1, mu, L = params.ell0, params.ell1, params.mu, params.L
    lam, rho_eps = params.lam, params.rho * params.epsilon
    if lam <= rho_eps and _tol_le(L, -l1 / mu):
        diag["reason"] = "lambda <= rho eps and L <= -l1/mu: both buy-side regions empty"
        return Case.CASE2III, diag
    if lam > rho_eps and _tol_le(L, l0 / mu):
        diag["reason"] = "lambda > rho eps and L <= l0/mu: open-to-buy empty"
        return Case.CASE2II, diag
    k0_max, km1_max = _k_scan(params)
    diag.update(k0_max=k0_max, km1_max=km1_max)
    if k0_max > 0 and km1_max > 0:
        diag["reason"] = "K0 and K-1 both positive somewhere"
        return Case.CASE2I, diag
    attempts = {}
    for case in (Case.CASE2I, Case.CASE2II, Case.CASE2III):
        try:
            rep = _CASE_SOLVERS[case](params)
        except SolverError as exc:
            attempts[case.value] = f"solve failed: {exc}"
            continue
        if verify:
            from .valuefn import assemble, verify_report
            ok, summary = verify_report(assemble(rep))
            attempts[case.value] = summary
            if not ok:
                continue
        diag["reason"] = "first candidate passing verification"
        diag["attempts"] = attempts
        return case, diag
    raise ClassificationError("no case yields a consistent solution", attempts=attempts)


def solve(params, case=None):
    """Classify (unless ``case`` is given) and solve; returns a :class:`SolveReport`."""
    diag = {}
    if case is None:
        case, diag = classify_case(params)
    rep = _CASE_SOLVERS[Case(case)](params)
    rep.diagnostics.setdefault("classification", diag)
    return rep
