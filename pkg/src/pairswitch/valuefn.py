"""Piecewise value functions for the three regimes and their verification.

With cutoffs ``open_buy < close_sell`` and ``close_buy < open_sell`` the
value functions are

* ``v0 = A1 psi+ - lam/rho - (x + eps)`` for ``x <= open_buy``,
  ``A0 psi+ + B0 psi-`` in between, and
  ``B-1 psi- - lam/rho + (x - eps)`` for ``x >= open_sell``;
* ``v1 = A1 psi+ - lam/rho`` below ``close_sell`` and ``v0 + x - eps`` from it on;
* ``v-1 = v0 - (x + eps)`` up to ``close_buy`` and ``B-1 psi- - lam/rho`` above.

Absent regions simply drop the corresponding piece; absent coefficients
are zero.  At a cutoff itself the switching-side piece is used (switching
regions are closed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import FundamentalPair, GainFunctions, ModelKind, ModelParams
from .solver import CutoffSet, Coefficients, SolveReport

__all__ = [
    "ValueTriple",
    "QviReport",
    "assemble",
    "smooth_fit_residuals",
    "smooth_fit_ok",
    "smooth_fit_scale",
    "qvi_residual",
    "verification_grid",
    "verify_report",
    "tabulate",
    "QVI_TOL",
    "CUTOFF_EXCLUSION",
]

QVI_TOL = 1e-7
SMOOTH_FIT_TOL = 1e-9
CUTOFF_EXCLUSION = 1e-6
REGIMES = (-1, 0, 1)


@dataclass(frozen=True)
class ValueTriple:
    cutoffs: CutoffSet
    coeffs: Coefficients
    pair: FundamentalPair
    gains: GainFunctions
    params: ModelParams
    # pairs carrying the scales of (A0, B0, A1, Bm1); default: ``pair`` for all
    coeff_pairs: tuple | None = None

    # -- building blocks ---------------------------------------------------
    def _c(self, name):
        v = getattr(self.coeffs, name)
        return 0.0 if v is None else float(v)

    def _pair_of(self, name):
        if self.coeff_pairs is None:
            return self.pair
        return self.coeff_pairs[("A0", "B0", "A1", "Bm1").index(name)]

    def _comb(self, x, a_name=None, b_name=None):
        """Jet of ``A psi+ + B psi-`` for the named coefficients, each on its
        own scale; a zero weight is never evaluated."""
        v = dv = ddv = 0.0
        A = self._c(a_name) if a_name else 0.0
        B = self._c(b_name) if b_name else 0.0
        if A != 0.0:
            f, df, ddf = self._pair_of(a_name).jet(x, +1)
            v, dv, ddv = A * f, A * df, A * ddf
        if B != 0.0:
            f, df, ddf = self._pair_of(b_name).jet(x, -1)
            v, dv, ddv = v + B * f, dv + B * df, ddv + B * ddf
        return v, dv, ddv

    def _lr(self):
        return self.params.lam_over_rho

    # pieces: each returns (v, v', v'')
    def _v0_left(self, x):
        v, dv, ddv = self._comb(x, "A1")
        return v - self._lr() - (x + self.gains.epsilon), dv - 1.0, ddv

    def _v0_mid(self, x):
        return self._comb(x, "A0", "B0")

    def _v0_right(self, x):
        v, dv, ddv = self._comb(x, None, "Bm1")
        return v - self._lr() + (x - self.gains.epsilon), dv + 1.0, ddv

    def _v1_cont(self, x):
        v, dv, ddv = self._comb(x, "A1")
        return v - self._lr(), dv, ddv

    def _v1_switch(self, x):
        v, dv, ddv = self._jet0(x)
        return v + x - self.gains.epsilon, dv + 1.0, ddv

    def _vm1_switch(self, x):
        v, dv, ddv = self._jet0(x)
        return v - (x + self.gains.epsilon), dv - 1.0, ddv

    def _vm1_cont(self, x):
        v, dv, ddv = self._comb(x, None, "Bm1")
        return v - self._lr(), dv, ddv

    def _jet0(self, x):
        c = self.cutoffs
        if c.open_buy is not None and x <= c.open_buy:
            return self._v0_left(x)
        if x >= c.open_sell:
            return self._v0_right(x)
        return self._v0_mid(x)

    # -- public evaluation ---------------------------------------------------
    def _check(self, x):
        if not (x > self.params.domain_lower and math.isfinite(x)):
            raise ValueError(f"x={x} outside the state space")

    def jet(self, regime, x):
        """``(v_i(x), v_i'(x), v_i''(x))`` from the piece active at ``x``."""
        self._check(x)
        c = self.cutoffs
        if regime == 0:
            return self._jet0(x)
        if regime == 1:
            return self._v1_switch(x) if x >= c.close_sell else self._v1_cont(x)
        if regime == -1:
            if c.close_buy is not None and x <= c.close_buy:
                return self._vm1_switch(x)
            return self._vm1_cont(x)
        raise ValueError(f"regime must be -1, 0 or 1, got {regime}")

    def eval(self, regime, x):
        return self.jet(regime, x)[0]

    def __call__(self, regime, x):
        return self.eval(regime, x)

    def boundaries(self):
        """``(name, x, regime, left_piece, right_piece)`` for each present cutoff."""
        c = self.cutoffs
        out = []
        if c.open_buy is not None:
            out.append(("open_buy", c.open_buy, 0, self._v0_left, self._v0_mid))
        out.append(("open_sell", c.open_sell, 0, self._v0_mid, self._v0_right))
        if c.close_sell > self.params.domain_lower:
            out.append(("close_sell", c.close_sell, 1, self._v1_cont, self._v1_switch))
        if c.close_buy is not None:
            out.append(("close_buy", c.close_buy, -1, self._vm1_switch, self._vm1_cont))
        return out


def assemble(report: SolveReport) -> ValueTriple:
    """Build the value functions from a solver report."""
    p = report.params
    return ValueTriple(report.cutoffs, report.coeffs, FundamentalPair(p), GainFunctions(p.epsilon), p,
                       report.coeffs.pairs(p))


def smooth_fit_scale(v):
    """``1 + lam/rho + max |cutoff|``: the magnitude the smooth-fit tolerance is relative to."""
    edges = [abs(e) for e in v.cutoffs.edges().values() if e is not None and math.isfinite(e)]
    return 1.0 + v.params.lam_over_rho + max(edges, default=0.0)


def smooth_fit_residuals(v: ValueTriple):
    """List of ``(boundary, value_jump, derivative_jump)`` at each present cutoff.

    The jumps compare the two adjacent pieces evaluated at the cutoff.  The
    piece on the switching side of ``open_buy``/``close_buy`` is ``v0``'s
    left piece, so continuity there is equivalent to the smooth-fit
    conditions linking ``v0`` with ``v1`` and ``v-1``.
    """
    out = []
    for name, x, _, left, right in v.boundaries():
        lv, ldv, _ = left(x)
        rv, rdv, _ = right(x)
        out.append((name, rv - lv, rdv - ldv))
    return out


def smooth_fit_ok(v: ValueTriple, tol=SMOOTH_FIT_TOL):
    s = tol * smooth_fit_scale(v)
    return all(abs(a) <= s and abs(b) <= s for _, a, b in smooth_fit_residuals(v))


@dataclass
class QviReport:
    """Per-point variational-inequality factors for each regime.

    ``generator[i]`` holds ``rho v_i - L v_i (+ lam for i != 0)`` and
    ``obstacle[i]`` holds ``v_i`` minus its switching obstacle.
    """

    x: np.ndarray
    generator: dict
    obstacle: dict
    values: dict
    tol: float = QVI_TOL
    violations: list = field(default_factory=list)

    def residual(self, regime):
        return np.minimum(self.generator[regime], self.obstacle[regime])

    @property
    def ok(self):
        return not self.violations

    def max_scaled(self):
        """Largest ``|min(...)|/(1+|v|)`` and largest negative factor over all regimes."""
        out = {}
        for i in REGIMES:
            w = 1.0 + np.abs(self.values[i])
            out[i] = {
                "min_abs": float(np.max(np.abs(self.residual(i)) / w)),
                "generator_neg": float(np.max(np.maximum(-self.generator[i], 0.0) / w)),
                "obstacle_neg": float(np.max(np.maximum(-self.obstacle[i], 0.0) / w)),
            }
        return out


def verification_grid(v: ValueTriple, n=1000, exclusion=CUTOFF_EXCLUSION):
    """``n`` points spanning the working domain (stretched to contain every
    cutoff with margin), with ``exclusion``-neighbourhoods of cutoffs removed."""
    p = v.params
    lo, hi = p.working_domain()
    edges = [e for e in v.cutoffs.edges().values() if e is not None and e > p.domain_lower]
    if p.kind is ModelKind.IGBM:
        hi = min(max(hi, 1.5 * max(edges)), v.pair.representable_range()[1])
    else:
        pad = 2.0 * p.sigma / math.sqrt(2.0 * p.mu)
        lo, hi = min(lo, min(edges) - pad), max(hi, max(edges) + pad)
    xs = np.linspace(lo, hi, n)
    keep = np.ones(n, dtype=bool)
    for e in edges:
        keep &= np.abs(xs - e) > exclusion
    return xs[keep]


def qvi_residual(v: ValueTriple, grid, tol=QVI_TOL):
    """Evaluate both factors of each regime's variational inequality on ``grid``.

    Each regime passes at ``x`` when both factors are ``>= -tol (1 + |v|)``
    and their minimum is ``<= tol (1 + |v|)``.
    """
    p = v.params
    g = v.gains
    xs = np.asarray(grid, dtype=float)
    gen = {i: np.empty_like(xs) for i in REGIMES}
    obs = {i: np.empty_like(xs) for i in REGIMES}
    vals = {i: np.empty_like(xs) for i in REGIMES}
    for k, x in enumerate(xs):
        jets = {i: v.jet(i, x) for i in REGIMES}
        s2 = p.sigma_at(x) ** 2
        for i in REGIMES:
            f, df, ddf = jets[i]
            vals[i][k] = f
            gen[i][k] = p.rho * f - p.drift_at(x) * df - 0.5 * s2 * ddf + (p.lam if i != 0 else 0.0)
        v0, v1, vm1 = jets[0][0], jets[1][0], jets[-1][0]
        obs[0][k] = v0 - max(v1 + g.g01(x), vm1 + g.g0m1(x))
        obs[1][k] = v1 - (v0 + g.g10(x))
        obs[-1][k] = vm1 - (v0 + g.gm10(x))
    rep = QviReport(xs, gen, obs, vals, tol)
    for i in REGIMES:
        w = tol * (1.0 + np.abs(vals[i]))
        bad = (gen[i] < -w) | (obs[i] < -w) | (np.minimum(gen[i], obs[i]) > w)
        for k in np.flatnonzero(bad):
            rep.violations.append((i, float(xs[k]), float(gen[i][k]), float(obs[i][k])))
    return rep


def verify_report(v: ValueTriple, n=1000):
    """Smooth fit plus QVI check; returns ``(ok, summary)``."""
    sf = smooth_fit_residuals(v)
    sf_ok = smooth_fit_ok(v)
    q = qvi_residual(v, verification_grid(v, n))
    summary = {
        "smooth_fit_max": max((max(abs(a), abs(b)) for _, a, b in sf), default=0.0),
        "smooth_fit_ok": sf_ok,
        "qvi_ok": q.ok,
        "qvi_violations": len(q.violations),
        "qvi_max": q.max_scaled(),
    }
    return sf_ok and q.ok, summary


def tabulate(v: ValueTriple, grid):
    """Array with columns ``x, v_-1, v_0, v_1``."""
    xs = np.asarray(grid, dtype=float)
    out = np.empty((xs.size, 4))
    out[:, 0] = xs
    for col, i in enumerate(REGIMES, start=1):
        out[:, col] = [v.eval(i, x) for x in xs]
    return out
