"""Finite-difference solver for the coupled variational inequalities.

Independent of the closed-form machinery: the three value functions are
discretized on a uniform grid and the obstacle problem

    min(rho v_0 - L v_0,  v_0 - max(v_1 + g01, v_-1 + g0-1)) = 0
    min(rho v_i - L v_i + lam,  v_i - (v_0 + g_i0)) = 0,   i = +-1

is solved by policy (Howard) iteration: each node of each regime either
"continues" (generator row) or "switches" (obstacle row), the resulting
sparse linear system is solved exactly, and the policy is updated by
picking the smallest row residual.

The generator uses central differences wherever that keeps the matrix an
M-matrix (``|drift| h <= sigma(x)^2``) and upwind differences elsewhere.
Far-field conditions:

* the state leaves the grid only through the ends; at the end where a
  regime must trade, that regime is forced to switch;
* the regime that never trades at a given end (long at the left for OU,
  short at the right) satisfies ``(v + lam/rho)' = r(x) (v + lam/rho)``
  with ``r`` the log-derivative of the algebraically decaying ODE
  solution (``-nu/(x - L)`` for OU, ``-a/x`` for IGBM);
* IGBM at ``x = 0``: the diffusion vanishes and the drift points inward,
  so the upwind stencil needs no boundary value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .model import GainFunctions, ModelKind, ModelParams, igbm_constants
from .solver import inclusion_bounds

__all__ = ["Grid", "OracleSolution", "OracleError", "default_grid", "solve_qvi_fd", "extract_edges",
           "generator_matrix"]

REGIMES = (-1, 0, 1)
_IDX = {-1: 0, 0: 1, 1: 2}


class OracleError(RuntimeError):
    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Grid:
    lower: float
    upper: float
    n: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("need lower < upper")
        if self.n < 201:
            raise ValueError("need n >= 201")

    @property
    def spacing(self):
        return (self.upper - self.lower) / (self.n - 1)

    @property
    def nodes(self):
        return np.linspace(self.lower, self.upper, self.n)


def default_grid(params: ModelParams, n=2001, cover=()):
    """Grid covering every inclusion interval with margin.

    OU: the working domain ``L +- 10 sigma/sqrt(2 mu)``.  IGBM: ``[0, U]``
    with ``U`` the larger of ``10 L`` and ten times the open-sell bound.
    Points in ``cover`` (e.g. known cutoffs; ``None`` entries are skipped)
    are included with a margin of 20% of their distance from ``L`` plus
    two stationary deviations (OU) or 50% (IGBM).
    """
    b = inclusion_bounds(params)
    pts = [float(v) for v in cover if v is not None and math.isfinite(v)]
    if params.kind is ModelKind.OU:
        lo, hi = params.working_domain()
        half = max(hi - params.L, 1.2 * max(abs(v - params.L) for v in b))
        sd = params.sigma / math.sqrt(2.0 * params.mu)
        for v in pts:
            half = max(half, 1.2 * abs(v - params.L) + 2.0 * sd)
        return Grid(params.L - half, params.L + half, n)
    hi = max([10.0 * params.L, 10.0 * b[1]] + [1.5 * v for v in pts])
    return Grid(0.0, hi, n)


@dataclass
class OracleSolution:
    grid: Grid
    x: np.ndarray
    values: dict
    policy: dict
    iterations: int
    last_update: float
    edges: dict = field(default_factory=dict)

    def value(self, regime):
        return self.values[regime]


def generator_matrix(params: ModelParams, grid: Grid):
    """Tridiagonal discretization of ``rho - L`` (interior rows only are meaningful).

    Returns ``(lower, diag, upper)`` coefficient arrays of length ``n``.
    """
    x = grid.nodes
    h = grid.spacing
    b = params.mu * (params.L - x)
    s2 = np.array([params.sigma_at(t) ** 2 for t in x])
    central = np.abs(b) * h <= s2
    lo = np.zeros_like(x)
    up = np.zeros_like(x)
    dg = np.full_like(x, params.rho)
    # diffusion
    dg += s2 / h**2
    lo -= 0.5 * s2 / h**2
    up -= 0.5 * s2 / h**2
    # drift: central where monotone, else upwind
    c = central
    lo[c] += b[c] / (2 * h)
    up[c] -= b[c] / (2 * h)
    pos = ~c & (b > 0)
    neg = ~c & (b <= 0)
    dg[pos] += b[pos] / h
    up[pos] -= b[pos] / h
    dg[neg] -= b[neg] / h
    lo[neg] += b[neg] / h
    return lo, dg, up


def _far_field_rate(params, x):
    """Log-derivative of the algebraically decaying solution at ``x``."""
    if params.kind is ModelKind.OU:
        return -(params.rho / params.mu) / (x - params.L)
    return -igbm_constants(params).a / x


def solve_qvi_fd(params: ModelParams, grid: Grid | None = None, max_iter=200, tol=1e-10):
    """Policy iteration for the discretized variational inequalities."""
    grid = grid or default_grid(params)
    n = grid.n
    x = grid.nodes
    h = grid.spacing
    gains = GainFunctions(params.epsilon)
    lr = params.lam_over_rho
    lo, dg, up = generator_matrix(params, grid)
    is_ou = params.kind is ModelKind.OU

    g = {(0, 1): gains.g01(x), (0, -1): gains.g0m1(x), (1, 0): gains.g10(x), (-1, 0): gains.gm10(x)}

    # forced rows at the ends: regime -> (node, target)
    forced = {(0, n - 1): -1, (1, n - 1): 0}
    if is_ou:
        forced.update({(0, 0): 1, (-1, 0): 0})
    robin = {(-1, n - 1)}
    if is_ou:
        robin.add((1, 0))

    policy = {i: np.full(n, i, dtype=int) for i in REGIMES}
    for (i, j), t in forced.items():
        policy[i][j] = t

    def assemble(policy):
        rows, cols, vals = [], [], []
        rhs = np.zeros(3 * n)
        for i in REGIMES:
            off = _IDX[i] * n
            pol = policy[i]
            for j in range(n):
                r = off + j
                t = pol[j]
                if t != i:
                    rows += [r, r]
                    cols += [r, _IDX[t] * n + j]
                    vals += [1.0, -1.0]
                    rhs[r] = g[(i, t)][j]
                    continue
                if (i, j) in robin:
                    # one-sided (v + lr)' = k (v + lr)
                    k = _far_field_rate(params, x[j])
                    if j == 0:
                        rows += [r, r]
                        cols += [r, r + 1]
                        vals += [-1.0 / h - k, 1.0 / h]
                    else:
                        rows += [r, r]
                        cols += [r, r - 1]
                        vals += [1.0 / h - k, -1.0 / h]
                    rhs[r] = k * lr
                    continue
                rows.append(r); cols.append(r); vals.append(dg[j])
                if j > 0:
                    rows.append(r); cols.append(r - 1); vals.append(lo[j])
                elif lo[j] != 0.0:
                    raise OracleError("stencil leaves the grid at the lower end", regime=i)
                if j < n - 1:
                    rows.append(r); cols.append(r + 1); vals.append(up[j])
                elif up[j] != 0.0:
                    raise OracleError("stencil leaves the grid at the upper end", regime=i)
                rhs[r] = -params.lam if i != 0 else 0.0
        A = sp.csr_matrix((vals, (rows, cols)), shape=(3 * n, 3 * n))
        return A, rhs

    def gen_residual(v, i):
        vi = v[i]
        res = dg * vi
        res[1:] += lo[1:] * vi[:-1]
        res[:-1] += up[:-1] * vi[1:]
        if i != 0:
            res = res + params.lam
        return res

    v_old = None
    update = math.inf
    for it in range(1, max_iter + 1):
        A, rhs = assemble(policy)
        sol = spsolve(A.tocsc(), rhs)
        if not np.all(np.isfinite(sol)):
            raise OracleError("singular policy system", iteration=it)
        v = {i: sol[_IDX[i] * n:(_IDX[i] + 1) * n] for i in REGIMES}
        if v_old is not None:
            update = max(float(np.max(np.abs(v[i] - v_old[i]))) for i in REGIMES)
        # policy improvement
        new = {}
        for i in REGIMES:
            cand = [gen_residual(v, i)]
            targets = [i]
            for t in ((1, -1) if i == 0 else (0,)):
                cand.append(v[i] - v[t] - g[(i, t)])
                targets.append(t)
            cand = np.vstack(cand)
            # ties go to continuation (first row)
            best = np.argmin(cand, axis=0)
            keep = cand[0] <= cand[best, np.arange(n)]
            best[keep] = 0
            new[i] = np.asarray(targets)[best]
        # no two-node switching cycles: drop the weaker of a pair
        for t in (1, -1):
            clash = (new[0] == t) & (new[t] == 0)
            if np.any(clash):
                gain0 = (v[t] + g[(0, t)] - v[0])[clash]
                gaint = (v[0] + g[(t, 0)] - v[t])[clash]
                idx = np.flatnonzero(clash)
                new[t][idx[gain0 >= gaint]] = t
                new[0][idx[gain0 < gaint]] = 0
        for (i, j), t in forced.items():
            new[i][j] = t
        for i, j in robin:
            new[i][j] = i
        stable = all(np.array_equal(new[i], policy[i]) for i in REGIMES)
        policy = new
        v_old = v
        if stable or update < tol:
            out = OracleSolution(grid, x, v, policy, it, 0.0 if stable else update)
            out.edges = extract_edges(out)
            return out
    raise OracleError("policy iteration did not converge", iterations=max_iter, last_update=update)


def extract_edges(sol: OracleSolution):
    """Region edges read off the converged policy.

    ``open_buy``/``close_buy`` are the last nodes of the regime-0 -> 1 and
    regime -1 -> 0 switching sets; ``close_sell``/``open_sell`` the first
    nodes of the regime 1 -> 0 and regime 0 -> -1 sets.  An empty set gives
    ``None``.  Nodes pinned by the far-field conditions are ignored.
    """
    x = sol.x
    p = sol.policy
    inner = slice(1, len(x) - 1)
    xi = x[inner]

    def last(mask):
        idx = np.flatnonzero(mask[inner])
        return float(xi[idx[-1]]) if idx.size else None

    def first(mask):
        idx = np.flatnonzero(mask[inner])
        return float(xi[idx[0]]) if idx.size else None

    edges = {
        "open_buy": last(p[0] == 1),
        "close_buy": last(p[-1] == 0),
        "close_sell": first(p[1] == 0),
        "open_sell": first(p[0] == -1),
    }
    return edges
