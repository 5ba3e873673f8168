"""Monte-Carlo simulation of spread paths and threshold switching strategies.

Paths: OU uses its exact Gaussian transition, IGBM a full-truncation Euler
scheme.  Random numbers come from a counter-based generator (Philox) keyed
by ``(seed, block)``, where paths are grouped in fixed-size blocks, so the
output does not depend on how the work is scheduled.

Strategy execution: a band policy is monitored on the time grid, and a
level crossed between two grid times (detected either from the endpoints
or, when both endpoints lie on the same side, by the Brownian-bridge
crossing probability ``exp(-2 d_0 d_1 / (s^2 dt))``) triggers a trade at
the level price at the middle of the step.  If the price already lies
inside the active switching region at a grid time, the trade happens at
that time and price.  A long position is never turned into a short one
(or vice versa) in a single trade: the strategy goes flat first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .model import GainFunctions, ModelKind, ModelParams, first_passage_laplace

__all__ = [
    "PathConfig",
    "StrategyOutcome",
    "HalvingCheck",
    "simulate_path",
    "run_strategy",
    "estimate_gain",
    "estimate_gains",
    "dt_halving_check",
    "estimate_hitting_laplace",
    "cutoff_array",
    "perturbed_cutoffs",
]

BLOCK = 2000
_CHUNK = 2048
# skip the bridge exponential when the crossing probability is below e^-40
_BRIDGE_CUT = 40.0


@dataclass(frozen=True)
class PathConfig:
    horizon: float
    dt: float
    n_paths: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not (self.horizon > 0 and self.dt > 0):
            raise ValueError("horizon and dt must be positive")
        if self.dt > self.horizon / 100.0:
            raise ValueError("need dt <= horizon/100")
        if self.n_paths < 1:
            raise ValueError("need n_paths >= 1")

    @property
    def n_steps(self):
        return int(math.ceil(self.horizon / self.dt - 1e-9))

    def discount_tail(self, rho):
        return math.exp(-rho * self.horizon)


@dataclass
class StrategyOutcome:
    mean_gain: float
    std_error: float
    n_switches_mean: float
    regime_occupancy: dict
    truncation_bound: float = 0.0
    n_paths: int = 0
    per_path: np.ndarray | None = field(default=None, repr=False)


@dataclass
class HalvingCheck:
    coarse: StrategyOutcome
    fine: StrategyOutcome
    difference: float
    difference_se: float

    @property
    def passes(self):
        """Halving ``dt`` moves the mean by less than one standard error."""
        return abs(self.difference) < min(self.coarse.std_error, self.fine.std_error)


def cutoff_array(cutoffs):
    """``[open_buy, close_buy, close_sell, open_sell]`` with NaN for absent regions."""
    f = lambda v: np.nan if v is None else float(v)
    return np.array([f(cutoffs.open_buy), f(cutoffs.close_buy), f(cutoffs.close_sell), f(cutoffs.open_sell)])


def perturbed_cutoffs(cutoffs, frac=0.2):
    """``(label, cutoffs)`` with each present, nonzero edge scaled by ``1 +- frac`` in turn."""
    out = []
    for name in ("open_buy", "close_buy", "close_sell", "open_sell"):
        val = getattr(cutoffs, name)
        if val is None or val == 0.0:
            continue
        for sgn, tag in ((1.0, "+"), (-1.0, "-")):
            out.append((f"{name}{tag}{frac:g}", replace(cutoffs, **{name: val * (1.0 + sgn * frac)})))
    return out


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True, inline='always')
def _bridge_hit(a, xp, xn, s2dt, u, down):
    """Did the path cross level ``a`` between endpoints ``xp`` and ``xn``?"""
    if down:
        if xn <= a or xp <= a:
            return True
        d = 2.0 * (xp - a) * (xn - a) / s2dt
    else:
        if xn >= a or xp >= a:
            return True
        d = 2.0 * (a - xp) * (a - xn) / s2dt
    # e^{-d} <= 1/(1+d): most draws are decided without the exponential
    if d > _BRIDGE_CUT or u * (1.0 + d) >= 1.0:
        return False
    return u < math.exp(-d)


@njit(cache=True, inline='always')
def _grid_switch(regime, x, ob, cb, cs, os_):
    """Target regime if ``x`` lies in the current switching region, else ``regime``."""
    if regime == 0:
        if x <= ob:
            return 1
        if x >= os_:
            return -1
    elif regime == 1:
        if x >= cs:
            return 0
    else:
        if x <= cb:
            return 0
    return regime


@njit(cache=True, inline='always')
def _switch_value(src, dst, price, t, eps, rho, lam):
    """Discounted payoff of a trade at time ``t`` plus the penalty bookkeeping.

    The inventory penalty of a holding period ``[t_in, t_out]`` is
    ``lam/rho (e^{-rho t_in} - e^{-rho t_out})``, booked at entry and exit.
    """
    d = math.exp(-rho * t)
    # buying (0->1 or -1->0) costs price + eps; selling earns price - eps
    if (src == 0 and dst == 1) or (src == -1 and dst == 0):
        v = -(price + eps) * d
    else:
        v = (price - eps) * d
    if src != 0:
        v += lam / rho * d
    if dst != 0:
        v -= lam / rho * d
    return v


@njit(cache=True, inline='always')
def _step(regime, xp, xn, t0, h, ob, cb, cs, os_, eps, rho, lam, s2dt, u):
    """Advance one strategy over ``[t0, t0 + h]``.

    Edges are ``NaN`` for absent regions.  Returns ``(regime at the end,
    gain increment, number of trades, time spent in the regime held
    during the first part of the step, that regime)``.
    """
    gain = 0.0
    nsw = 0
    # trade at the grid time if already inside the switching region
    tgt = _grid_switch(regime, xp, ob, cb, cs, os_)
    if tgt != regime:
        gain += _switch_value(regime, tgt, xp, t0, eps, rho, lam)
        regime = tgt
        nsw += 1
    level = 0.0
    tgt = regime
    if regime == 0:
        if ob == ob and _bridge_hit(ob, xp, xn, s2dt, u, True):
            level, tgt = ob, 1
        elif os_ == os_ and _bridge_hit(os_, xp, xn, s2dt, u, False):
            level, tgt = os_, -1
    elif regime == 1:
        if cs == cs and _bridge_hit(cs, xp, xn, s2dt, u, False):
            level, tgt = cs, 0
    else:
        if cb == cb and _bridge_hit(cb, xp, xn, s2dt, u, True):
            level, tgt = cb, 0
    first = regime
    if tgt != regime:
        gain += _switch_value(regime, tgt, level, t0 + 0.5 * h, eps, rho, lam)
        return tgt, gain, nsw + 1, 0.5 * h, first
    return regime, gain, nsw, h, first


@njit(cache=True)
def _advance_groups(is_ou, mu, L, sigma, rho, lam, eps, cuts, group, ms, z, u, h, k0,
                    xg, accg, reg, gain, nsw, occ):
    """Advance all paths over the fine steps ``k0 .. k0 + len(z) - 1``.

    Group ``g`` observes the path every ``ms[g]`` fine steps; strategy
    ``s`` belongs to group ``group[s]``.  OU groups share the exact path;
    IGBM groups each run their own Euler chain driven by the summed fine
    increments, so different step sizes stay coupled.  ``occ[r + 1]``
    accumulates time spent in regime ``r``.
    """
    n_fine, n_paths = z.shape
    n_strat = cuts.shape[0]
    n_grp = ms.shape[0]
    e1 = math.exp(-mu * h)
    s_h = sigma * math.sqrt((1.0 - math.exp(-2.0 * mu * h)) / (2.0 * mu))
    sq = math.sqrt(h)
    eH = np.empty(n_grp)
    for g in range(n_grp):
        eH[g] = math.exp(-mu * ms[g] * h)
    for k in range(n_fine):
        kk = k0 + k
        for g in range(n_grp):
            m = ms[g]
            observe = (kk + 1) % m == 0
            H = m * h
            t0 = (kk + 1 - m) * h
            for p in range(n_paths):
                zz = z[k, p]
                if is_ou:
                    acc = accg[g, p] * e1 + s_h * zz
                else:
                    acc = accg[g, p] + sq * zz
                if not observe:
                    accg[g, p] = acc
                    continue
                accg[g, p] = 0.0
                xp = xg[g, p]
                if is_ou:
                    xn = L + (xp - L) * eH[g] + acc
                    s2dt = sigma * sigma * H
                    xpo, xno = xp, xn
                else:
                    xpos = xp if xp > 0.0 else 0.0
                    xn = xp + mu * (L - xpos) * H + sigma * xpos * acc
                    s2dt = (sigma * xpos) ** 2 * H
                    if s2dt <= 0.0:
                        s2dt = 1e-300
                    xpo = xp if xp > 0.0 else 1e-300
                    xno = xn if xn > 0.0 else 1e-300
                xg[g, p] = xn
                uu = u[k, p]
                for s in range(n_strat):
                    if group[s] != g:
                        continue
                    r, dg, dn, tf, rf = _step(reg[s, p], xpo, xno, t0, H, cuts[s, 0], cuts[s, 1], cuts[s, 2],
                                              cuts[s, 3], eps, rho, lam, s2dt, uu)
                    if dn:
                        gain[s, p] += dg
                        nsw[s, p] += dn
                        reg[s, p] = r
                        occ[s, p, rf + 1] += tf
                        occ[s, p, r + 1] += H - tf
                    else:
                        occ[s, p, rf + 1] += H


@njit(cache=True)
def _hitting_paths(mu, L, sigma, rho, y, z, u, h, t_start, x, done, acc):
    n_steps, n_paths = z.shape
    sq = math.sqrt(h)
    for p in range(n_paths):
        if done[p]:
            continue
        xp = x[p]
        t = t_start
        for k in range(n_steps):
            xpos = xp if xp > 0.0 else 0.0
            xn = xp + mu * (L - xpos) * h + sigma * xpos * sq * z[k, p]
            s2dt = (sigma * xpos) ** 2 * h
            if s2dt <= 0.0:
                s2dt = 1e-300
            if _bridge_hit(y, xp, xn, s2dt, u[k, p], False):
                acc[p] = math.exp(-rho * (t + 0.5 * h))
                done[p] = True
                break
            xp = xn
            t += h
        x[p] = xp


# ---------------------------------------------------------------------------
# python drivers
# ---------------------------------------------------------------------------

def _block_rng(seed, block):
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(block)]))


def _check_x0(params, x0):
    if not x0 > params.domain_lower:
        raise ValueError(f"x0={x0} outside the state space")


def simulate_path(params: ModelParams, x0, cfg: PathConfig, path_index=0):
    """One path on the grid ``t_k = k dt``; returns ``(t, x)``.

    Path ``i`` uses the same random numbers as path ``i`` of
    :func:`estimate_gain` with the same configuration.
    """
    _check_x0(params, x0)
    n = cfg.n_steps
    z, _ = _noise_for_path(cfg.seed, path_index, n)
    t = np.arange(n + 1) * cfg.dt
    x = np.empty(n + 1)
    x[0] = x0
    if params.kind is ModelKind.OU:
        e1 = math.exp(-params.mu * cfg.dt)
        s = params.sigma * math.sqrt((1.0 - math.exp(-2.0 * params.mu * cfg.dt)) / (2.0 * params.mu))
        for k in range(n):
            x[k + 1] = params.L + (x[k] - params.L) * e1 + s * z[k]
    else:
        sq = math.sqrt(cfg.dt)
        xr = x0
        for k in range(n):
            xpos = max(xr, 0.0)
            xr = xr + params.mu * (params.L - xpos) * cfg.dt + params.sigma * xpos * sq * z[k]
            x[k + 1] = xr if xr > 0.0 else 1e-300
    return t, x


def _noise_for_path(seed, path_index, n_steps):
    block, col = divmod(path_index, BLOCK)
    rng = _block_rng(seed, block)
    zs, us = [], []
    done = 0
    while done < n_steps:
        c = min(_CHUNK, n_steps - done)
        zs.append(rng.standard_normal((c, BLOCK))[:, col])
        us.append(rng.random((c, BLOCK))[:, col])
        done += c
    return np.concatenate(zs), np.concatenate(us)


def run_strategy(path, cutoffs, start_regime, gains: GainFunctions, params: ModelParams, uniforms=None):
    """Discounted realized gain of the band policy along one path.

    ``path`` is ``(t, x)`` on a uniform grid.  ``uniforms`` (one per step)
    drive the bridge crossing test; without them only grid-time and
    endpoint crossings count.  Returns ``(gain, regimes)`` where
    ``regimes[0]`` is ``start_regime`` and ``regimes[k]`` the regime
    reached at the end of step ``k-1``, before any trade at ``t[k]``.
    """
    t, x = path
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(x) - 1
    u = np.ones(n) if uniforms is None else np.asarray(uniforms, dtype=float)
    cut = cutoff_array(cutoffs)
    regime = int(start_regime)
    eps, rho, lam = gains.epsilon, params.rho, params.lam
    gain = -lam / rho * math.exp(-rho * t[0]) if regime != 0 else 0.0
    regimes = np.empty(n + 1, dtype=np.int64)
    regimes[0] = regime
    ob, cb, cs, os_ = cut
    for k in range(n):
        h = t[k + 1] - t[k]
        s2dt = params.sigma_at(max(x[k], 0.0)) ** 2 * h
        regime, dg, _, _, _ = _step(regime, x[k], x[k + 1], t[k], h, ob, cb, cs, os_, eps, rho, lam,
                                    max(s2dt, 1e-300), u[k])
        gain += dg
        regimes[k + 1] = regime
    if regime != 0:
        gain += lam / rho * math.exp(-rho * t[-1])
    return gain, regimes


def _simulate(params, x0, regime, cut_list, group, ms, cfg, h):
    """Per-path statistics for several strategies on shared paths.

    Noise is generated at fine step ``h``; group ``g`` monitors every
    ``ms[g]`` fine steps.  Returns ``gain (S, P)``, ``nsw (S, P)``,
    ``occ (S, P, 3)`` and the simulated horizon.
    """
    _check_x0(params, x0)
    cuts = np.vstack([cutoff_array(c) for c in cut_list])
    group = np.asarray(group, dtype=np.int64)
    ms = np.asarray(ms, dtype=np.int64)
    S, P, G = cuts.shape[0], cfg.n_paths, ms.size
    mmax = int(ms.max())
    n_fine = int(math.ceil(cfg.horizon / (mmax * h) - 1e-9)) * mmax
    T = n_fine * h
    gain = np.zeros((S, P))
    nsw = np.zeros((S, P))
    occ = np.zeros((S, P, 3))
    is_ou = params.kind is ModelKind.OU
    lr = params.lam_over_rho
    for b0 in range(0, P, BLOCK):
        rng = _block_rng(cfg.seed, b0 // BLOCK)
        w = min(BLOCK, P - b0)
        xg = np.full((G, w), float(x0))
        accg = np.zeros((G, w))
        reg = np.full((S, w), int(regime), dtype=np.int64)
        g = np.full((S, w), -lr if regime != 0 else 0.0)
        ns = np.zeros((S, w))
        oc = np.zeros((S, w, 3))
        done = 0
        while done < n_fine:
            c = min(_CHUNK, n_fine - done)
            z = np.ascontiguousarray(rng.standard_normal((c, BLOCK))[:, :w])
            u = np.ascontiguousarray(rng.random((c, BLOCK))[:, :w])
            _advance_groups(is_ou, params.mu, params.L, params.sigma, params.rho, params.lam, params.epsilon,
                            cuts, group, ms, z, u, h, done, xg, accg, reg, g, ns, oc)
            done += c
        g += np.where(reg != 0, lr * math.exp(-params.rho * T), 0.0)
        gain[:, b0:b0 + w] = g
        nsw[:, b0:b0 + w] = ns
        occ[:, b0:b0 + w] = oc
    return gain, nsw, occ, T


def _outcome(gain, nsw, occ, horizon, bound):
    P = gain.size
    se = float(np.std(gain, ddof=1) / math.sqrt(P)) if P > 1 else 0.0
    tot = occ.sum(axis=0) / P
    return StrategyOutcome(
        mean_gain=float(np.mean(gain)),
        std_error=se,
        n_switches_mean=float(np.mean(nsw)),
        regime_occupancy={-1: float(tot[0] / horizon), 0: float(tot[1] / horizon), 1: float(tot[2] / horizon)},
        truncation_bound=bound,
        n_paths=P,
        per_path=gain,
    )


def truncation_bound(params, cfg, value_scale=None):
    """Bound on the discounted gain lost by stopping at the horizon.

    ``e^{-rho T}`` times a bound on ``|v_i|`` over the states reached;
    ``value_scale`` defaults to ``lam/rho + 1``.
    """
    scale = params.lam_over_rho + 1.0 if value_scale is None else value_scale
    return cfg.discount_tail(params.rho) * scale


def estimate_gains(params, x0, regime, cutoff_list, cfg: PathConfig, value_scale=None):
    """:func:`estimate_gain` for several cutoff sets on common random numbers."""
    cut_list = list(cutoff_list)
    g, ns, oc, T = _simulate(params, x0, regime, cut_list, [0] * len(cut_list), [1], cfg, cfg.dt)
    bound = truncation_bound(params, cfg, value_scale)
    return [_outcome(g[s], ns[s], oc[s], T, bound) for s in range(g.shape[0])]


def estimate_gain(params, x0, regime, cutoffs, cfg: PathConfig, value_scale=None):
    """Monte-Carlo mean and standard error of the realized gain."""
    return estimate_gains(params, x0, regime, [cutoffs], cfg, value_scale)[0]


def dt_halving_check(params, x0, regime, cutoffs, cfg: PathConfig, value_scale=None, extra=()):
    """Compare ``dt`` with ``dt/2`` on coupled paths (shared Brownian increments).

    Both resolutions are driven by the same fine increments, so the
    difference isolates the time-discretization effect.  ``extra`` cutoff
    sets are evaluated at ``dt`` on the same paths and returned as a list
    after the check.
    """
    cut_list = [cutoffs, cutoffs, *extra]
    group = [0, 1] + [0] * len(extra)
    g, ns, oc, T = _simulate(params, x0, regime, cut_list, group, [2, 1], cfg, cfg.dt / 2.0)
    bound = truncation_bound(params, cfg, value_scale)
    outs = [_outcome(g[s], ns[s], oc[s], T, bound) for s in range(g.shape[0])]
    d = g[1] - g[0]
    chk = HalvingCheck(outs[0], outs[1], float(np.mean(d)), float(np.std(d, ddof=1) / math.sqrt(d.size)))
    return chk, outs[2:]


def estimate_hitting_laplace(params: ModelParams, x0, y, cfg: PathConfig):
    """Monte-Carlo ``E[exp(-rho tau_y)]`` for the first upward passage of ``y`` (IGBM).

    Returns ``(mean, std_error, closed_form)``; paths that have not hit by
    the horizon contribute zero, a bias of at most ``exp(-rho T)``.
    """
    if params.kind is not ModelKind.IGBM:
        raise ValueError("hitting-time estimator is for the IGBM model")
    if not 0 < x0 <= y:
        raise ValueError("need 0 < x0 <= y")
    exact = first_passage_laplace(x0, y, params)
    if x0 == y:
        return 1.0, 0.0, exact
    P = cfg.n_paths
    n = cfg.n_steps
    acc = np.zeros(P)
    for b0 in range(0, P, BLOCK):
        rng = _block_rng(cfg.seed, b0 // BLOCK)
        w = min(BLOCK, P - b0)
        x = np.full(w, float(x0))
        done = np.zeros(w, dtype=np.bool_)
        a = np.zeros(w)
        k = 0
        while k < n and not done.all():
            c = min(_CHUNK, n - k)
            z = np.ascontiguousarray(rng.standard_normal((c, BLOCK))[:, :w])
            u = np.ascontiguousarray(rng.random((c, BLOCK))[:, :w])
            _hitting_paths(params.mu, params.L, params.sigma, params.rho, float(y), z, u, cfg.dt, k * cfg.dt,
                           x, done, a)
            k += c
        acc[b0:b0 + w] = a
    return float(acc.mean()), float(acc.std(ddof=1) / math.sqrt(P)), exact
