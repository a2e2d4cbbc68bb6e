"""Exact primal/dual computation on small finite trees.

The primal side maximizes expected terminal utility over nonnegative
self-financing wealth started from per-node capital at an intermediate time;
the dual side minimizes the conjugate field over the polytope of
supermartingale deflators.  Both reduce to backward recursions with one
small convex program per node:

* primal: the one-step optimal fraction solves a strictly monotone
  first-order condition on the open interval of admissible fractions, and
  the value factorizes through the utility's homogeneity (a positive factor
  per node for power utilities, an additive term for log).
* dual: with one-step deflator ratios zeta (one per branch), the
  supermartingale constraints against every admissible wealth process
  reduce exactly to the two extreme-fraction constraints, which are both
  active at the optimum whenever the one-step return is two-sided; the
  optimum then lives on a point (two branches) or a segment (three
  branches) and is polished to near machine accuracy.

Certified checks for weak duality, conjugacy/biconjugacy, the first-order
optimality relations and the polar structure of the primal/dual domains sit
on top of the solvers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

import numpy as np

from .market import TreeMarket
from .utility import LogUtility

__all__ = [
    "PrimalSolution",
    "DualSolution",
    "DualitySolution",
    "solve_primal",
    "solve_dual",
    "solve_pair",
    "check_weak_duality",
    "check_conjugacy",
    "check_optimality_relations",
    "check_polarity",
]

TREE_PERIOD_CAP = 5
TREE_BRANCH_CAP = 3
_ZERO_RET = 1e-15


def _enforce_caps(market: TreeMarket) -> None:
    tree = market.tree
    if tree.n_periods > TREE_PERIOD_CAP:
        raise ValueError(f"trees are capped at {TREE_PERIOD_CAP} periods")
    widest = max((len(c) for c in tree.children), default=0)
    if widest > TREE_BRANCH_CAP:
        raise ValueError(f"branching is capped at {TREE_BRANCH_CAP}")


def _family(field):
    """(is_log, gamma) for the supported utility families."""
    if isinstance(field, LogUtility):
        return True, 1.0
    return False, float(field.gamma)


def _leaf_weights(market: TreeMarket, field) -> np.ndarray:
    n_leaves = market.tree.leaves.size
    is_log, _ = _family(field)
    if is_log:
        return np.ones(n_leaves)
    return np.asarray(field.weight(np.arange(n_leaves)) * np.ones(n_leaves))


# ---------------------------------------------------------------------------
# Primal backward recursion
# ---------------------------------------------------------------------------

def _interior_fraction(w: np.ndarray, dr: np.ndarray, gamma: float,
                       h_lo: float, h_hi: float, init: float | None = None) -> float:
    """Root of phi(h) = sum w_c dr_c (1 + h dr_c)^(-gamma), the strictly
    decreasing marginal value of the one-step fraction.  The Inada behaviour
    of the utilities pushes the optimum inside (h_lo, h_hi), where the
    bracket endpoints zero out one branch's wealth."""

    def phi(h):
        base = 1.0 + h * dr
        with np.errstate(divide="ignore", over="ignore"):
            out = np.where(base > 0, base, np.nan) ** (-gamma)
        return float(np.sum(w * dr * out))

    span = h_hi - h_lo
    lo, hi = h_lo + 1e-12 * span, h_hi - 1e-12 * span
    flo, fhi = phi(lo), phi(hi)
    # analytic signs: +inf at the lower end, -inf at the upper end
    if not (flo > 0 and fhi < 0):
        # move closer to the singular endpoints until the signs appear
        shrink = 1e-13 * span
        lo, hi = h_lo + shrink, h_hi - shrink
        flo, fhi = phi(lo), phi(hi)
        if not (flo > 0 and fhi < 0):
            raise ArithmeticError("one-step first-order condition lost its bracket")
    h = float(init) if init is not None and lo < init < hi else 0.5 * (lo + hi)
    if not (lo < h < hi):
        h = 0.5 * (lo + hi)
    for _ in range(200):
        f = phi(h)
        if f > 0:
            lo = h
        else:
            hi = h
        base = 1.0 + h * dr
        fp = float(np.sum(-gamma * w * dr ** 2 * base ** (-gamma - 1.0)))
        step = f / fp if fp != 0 else np.nan
        h_new = h - step if np.isfinite(step) else 0.5 * (lo + hi)
        if not (lo < h_new < hi):
            h_new = 0.5 * (lo + hi)
        if abs(h_new - h) < 1e-16 * (1.0 + abs(h)):
            return h_new
        h = h_new
    return h


@dataclass
class PrimalSolution:
    """Backward-programming solution of the indirect-utility problem."""

    market: TreeMarket
    field: object
    t: int
    xi: np.ndarray            # per time-t node
    value: np.ndarray         # conditional optimal value per time-t node
    fraction: np.ndarray      # optimal one-step fraction per node (nan at leaves)
    factor: np.ndarray        # per-node value factor (power) or additive term (log)
    relative_wealth: np.ndarray   # optimal wealth from 1 at each time-t node

    @property
    def rho(self) -> np.ndarray:
        """Optimal terminal claim per leaf, relative to its time-t ancestor."""
        return self.relative_wealth[self.market.tree.leaves]

    def marginal(self) -> np.ndarray:
        """d(value)/d(xi) per time-t node, from the value factorization."""
        is_log, gamma = _family(self.field)
        t_nodes = self.market.tree.levels[self.t]
        out = np.full(t_nodes.size, np.inf)
        pos = self.xi > 0
        if is_log:
            out[pos] = 1.0 / self.xi[pos]
        else:
            out[pos] = self.factor[t_nodes[pos]] * self.xi[pos] ** (-gamma)
        return out


def _field_key(field):
    is_log, gamma = _family(field)
    if is_log:
        return ("log",)
    w = getattr(field, "weights", None)
    return ("power", gamma, None if w is None else w.tobytes())


def primal_factors(market: TreeMarket, field, init_fraction=None):
    """One backward sweep of optimal fractions and value factors.

    The recursion is independent of the start time and the capital level;
    ``init_fraction`` only seeds the per-node root solve (used to confirm
    that different initializations reach the same optimizer).  Results are
    memoized on the market per utility family.
    """
    cache = market.dp_cache
    key = ("primal",) + _field_key(field)
    if init_fraction is None and key in cache:
        return cache[key]
    _enforce_caps(market)
    tree = market.tree
    is_log, gamma = _family(field)
    weights = _leaf_weights(market, field)

    fraction = np.full(tree.n_nodes, np.nan)
    factor = np.zeros(tree.n_nodes)
    if is_log:
        factor[tree.leaves] = 0.0
    else:
        factor[tree.leaves] = weights

    for k in range(tree.n_periods - 1, -1, -1):
        for n in tree.levels[k]:
            c = tree.children[n]
            p = tree.branch_prob[c]
            dr = market.dr0[c]
            fc = factor[c]
            if np.all(np.abs(dr) < _ZERO_RET):
                h = 0.0
            else:
                h_lo, h_hi = market.fraction_bounds(n)
                w = p if is_log else p * fc
                h0 = None if init_fraction is None else float(init_fraction)
                h = _interior_fraction(w, dr, gamma, h_lo, h_hi, init=h0)
            fraction[n] = h
            growth = 1.0 + h * dr
            if is_log:
                factor[n] = float(np.dot(p, fc + np.log(growth)))
            else:
                factor[n] = float(np.dot(p, fc * growth ** (1.0 - gamma)))
    if init_fraction is None:
        cache[key] = (fraction, factor)
    return fraction, factor


def solve_primal(market: TreeMarket, field, xi, t: int = 0,
                 init_fraction=None) -> PrimalSolution:
    """Conditional utility maximization started at time index ``t``.

    ``xi`` is the capital per time-t node (scalars broadcast, values >= 0).
    Nodes with xi = 0 and unbounded-below utility report value -inf and make
    no optimizer claim; elsewhere the optimizer is unique.
    """
    tree = market.tree
    if not 0 <= t <= tree.n_periods:
        raise ValueError(f"start index {t} outside the grid")
    t_nodes = tree.levels[t]
    xi = np.broadcast_to(np.asarray(xi, dtype=float), t_nodes.shape).copy()
    if np.any(xi < 0):
        raise ValueError("capital must be nonnegative")

    fraction, factor = primal_factors(market, field, init_fraction=init_fraction)

    rel = np.full(tree.n_nodes, np.nan)
    rel[t_nodes] = 1.0
    for k in range(t, tree.n_periods):
        for n in tree.levels[k]:
            c = tree.children[n]
            rel[c] = rel[n] * (1.0 + fraction[n] * market.dr0[c])

    is_log, gamma = _family(field)
    value = np.empty(t_nodes.size)
    for j, n in enumerate(t_nodes):
        if xi[j] > 0:
            if is_log:
                value[j] = np.log(xi[j]) + factor[n]
            else:
                value[j] = factor[n] * xi[j] ** (1.0 - gamma) / (1.0 - gamma)
        else:
            value[j] = field.u_at_zero()
    return PrimalSolution(market=market, field=field, t=t, xi=xi, value=value,
                          fraction=fraction, factor=factor, relative_wealth=rel)


def evaluate_fractions(market: TreeMarket, field, fraction: np.ndarray, xi,
                       t: int = 0) -> np.ndarray:
    """Conditional expected terminal utility of a fixed fraction policy
    (no optimization): the feasible-candidate value the optimizer must beat."""
    tree = market.tree
    t_nodes = tree.levels[t]
    xi = np.broadcast_to(np.asarray(xi, dtype=float), t_nodes.shape)
    rel = np.full(tree.n_nodes, np.nan)
    rel[t_nodes] = 1.0
    for k in range(t, tree.n_periods):
        for n in tree.levels[k]:
            c = tree.children[n]
            rel[c] = rel[n] * (1.0 + fraction[n] * market.dr0[c])
    if np.any(rel[tree.leaves] < 0):
        raise ValueError("fraction policy drives wealth below zero")
    out = np.empty(t_nodes.size)
    leaf_ids = np.arange(tree.leaves.size)
    util = np.zeros(tree.n_nodes)
    for j, leaf in enumerate(tree.leaves):
        anc = tree.ancestor_at(int(leaf), t)
        slot = int(np.searchsorted(t_nodes, anc))
        util[leaf] = field.u(xi[slot] * rel[leaf], leaf_ids[j])
    cond = tree.condexp_from_leaves(util[tree.leaves])
    out[:] = cond[t_nodes]
    return out


# ---------------------------------------------------------------------------
# Dual backward recursion
# ---------------------------------------------------------------------------

def _segment_minimize(obj, dobj, s_lo: float, s_hi: float) -> float:
    """Golden-section bracketing plus a safeguarded Newton-like polish of a
    strictly convex function on [s_lo, s_hi]."""
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = s_lo, s_hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = obj(c), obj(d)
    for _ in range(200):
        if b - a < 1e-13 * (1.0 + abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = obj(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = obj(d)
    s = 0.5 * (a + b)
    # derivative bisection to sharpen the argument
    lo, hi = s_lo, s_hi
    g_lo, g_hi = dobj(lo + 1e-14 * (s_hi - s_lo)), dobj(hi - 1e-14 * (s_hi - s_lo))
    if g_lo < 0 < g_hi:
        lo_, hi_ = lo, hi
        for _ in range(200):
            mid = 0.5 * (lo_ + hi_)
            if dobj(mid) < 0:
                lo_ = mid
            else:
                hi_ = mid
            if hi_ - lo_ < 1e-15 * (1.0 + abs(mid)):
                break
        s = 0.5 * (lo_ + hi_)
    return s


def _grid_min(obj, a: np.ndarray, b: np.ndarray, m: int, n: int = 60):
    """Coarse masked-grid fallback over the full polytope {z >= 0, az <= 1,
    bz <= 1}; only reached if the segment geometry degenerates."""
    caps = []
    for c in range(m):
        bound = min((1.0 / a[c]) if a[c] > 0 else np.inf,
                    (1.0 / b[c]) if b[c] > 0 else np.inf)
        caps.append(bound if np.isfinite(bound) else 10.0)
    axes = [np.linspace(1e-9, cap, n) for cap in caps]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    feas = (pts @ a <= 1 + 1e-12) & (pts @ b <= 1 + 1e-12)
    pts = pts[feas]
    vals = np.array([obj(z) for z in pts])
    best = pts[int(np.argmin(vals))]
    return best


def _solve_node_dual(p: np.ndarray, dr: np.ndarray, child_factor: np.ndarray,
                     is_log: bool, gamma: float, h_lo: float, h_hi: float):
    """One-step deflator ratios minimizing the conditional conjugate value.

    Returns (zeta per branch, optimal one-step objective).  For power
    conjugates the objective is sum p K zeta^beta with beta = 1 - 1/gamma;
    for log it is sum p (A - log zeta).
    """
    m = p.size
    beta = 1.0 - 1.0 / gamma

    def obj(z):
        z = np.asarray(z, dtype=float)
        if is_log:
            with np.errstate(divide="ignore"):
                return float(np.sum(p * (child_factor - np.log(np.maximum(z, 0.0)))))
        with np.errstate(divide="ignore"):
            zz = np.where(z > 0, z, 0.0)
            pw = np.where(zz > 0, zz ** beta, np.inf if beta < 0 else 0.0)
        return float(np.sum(p * child_factor * pw))

    if np.all(np.abs(dr) < _ZERO_RET):
        # single budget constraint sum p zeta = 1; separable closed form
        if is_log:
            zeta = np.ones(m)
        else:
            raw = np.abs(child_factor) ** gamma
            zeta = raw / float(np.dot(p, raw))
        return zeta, obj(zeta)

    a = np.maximum(p * (1.0 + h_lo * dr), 0.0)
    b = np.maximum(p * (1.0 + h_hi * dr), 0.0)

    if m == 2:
        mat = np.array([a, b])
        try:
            zeta = np.linalg.solve(mat, np.ones(2))
        except np.linalg.LinAlgError:
            zeta = _grid_min(obj, a, b, m)
        if np.any(zeta < -1e-12):
            zeta = _grid_min(obj, a, b, m)
        zeta = np.maximum(zeta, 0.0)
        return zeta, obj(zeta)

    if m == 3:
        d = np.cross(a, b)
        nd = np.linalg.norm(d)
        if nd < 1e-14:
            zeta = _grid_min(obj, a, b, m)
            return zeta, obj(zeta)
        d = d / nd
        zp, *_ = np.linalg.lstsq(np.array([a, b]), np.ones(2), rcond=None)
        s_lo, s_hi = -np.inf, np.inf
        for c in range(3):  # zp + s d >= 0 componentwise
            if d[c] > 1e-14:
                s_lo = max(s_lo, -zp[c] / d[c])
            elif d[c] < -1e-14:
                s_hi = min(s_hi, -zp[c] / d[c])
            elif zp[c] < -1e-12:
                s_lo = np.inf  # infeasible with this parametrization
        if not (np.isfinite(s_lo) and np.isfinite(s_hi) and s_lo <= s_hi):
            zeta = _grid_min(obj, a, b, m)
            return zeta, obj(zeta)

        def seg_obj(s):
            return obj(zp + s * d)

        def seg_dobj(s):
            z = np.maximum(zp + s * d, 1e-300)
            if is_log:
                return float(np.sum(-p * d / z))
            return float(np.sum(p * child_factor * beta * z ** (beta - 1.0) * d))

        s = _segment_minimize(seg_obj, seg_dobj, s_lo, s_hi)
        zeta = np.maximum(zp + s * d, 0.0)
        return zeta, obj(zeta)

    raise ValueError(f"branching {m} exceeds the supported cap")


@dataclass
class DualSolution:
    """Minimizing supermartingale deflator and the conditional dual value."""

    market: TreeMarket
    field: object
    t: int
    eta: np.ndarray          # per time-t node
    value: np.ndarray        # v per time-t node at eta
    zeta: np.ndarray         # optimal one-step ratio on the branch into each node
    factor: np.ndarray       # dual value factor (power) or additive term (log)
    z: np.ndarray            # deflator path values, 1 at the time-t nodes

    @property
    def z_terminal(self) -> np.ndarray:
        return self.z[self.market.tree.leaves]

    def conjugate_eta(self, xi) -> np.ndarray:
        """Capital-to-marginal map: the minimizer of v(eta) + xi eta."""
        is_log, gamma = _family(self.field)
        t_nodes = self.market.tree.levels[self.t]
        xi = np.broadcast_to(np.asarray(xi, dtype=float), t_nodes.shape)
        if np.any(xi <= 0):
            raise ValueError("the conjugate point needs strictly positive capital")
        if is_log:
            return 1.0 / xi
        beta = 1.0 - 1.0 / gamma
        k = self.factor[t_nodes]
        return (-k * beta / xi) ** gamma


def dual_factors(market: TreeMarket, field):
    """Backward sweep of optimal one-step deflator ratios and dual factors."""
    cache = market.dp_cache
    key = ("dual",) + _field_key(field)
    if key in cache:
        return cache[key]
    _enforce_caps(market)
    tree = market.tree
    is_log, gamma = _family(field)
    weights = _leaf_weights(market, field)

    zeta = np.full(tree.n_nodes, np.nan)
    factor = np.zeros(tree.n_nodes)
    if is_log:
        factor[tree.leaves] = -1.0  # conjugate of log at y: -log y - 1
    else:
        factor[tree.leaves] = (gamma / (1.0 - gamma)) * weights ** (1.0 / gamma)

    for k in range(tree.n_periods - 1, -1, -1):
        for n in tree.levels[k]:
            c = tree.children[n]
            dr = market.dr0[c]
            if np.all(np.abs(dr) < _ZERO_RET):
                h_lo, h_hi = 0.0, 0.0
            else:
                h_lo, h_hi = market.fraction_bounds(n)
            zc, val = _solve_node_dual(tree.branch_prob[c], dr, factor[c],
                                       is_log, gamma, h_lo, h_hi)
            zeta[c] = zc
            factor[n] = val
    cache[key] = (zeta, factor)
    return zeta, factor


def solve_dual(market: TreeMarket, field, eta, t: int = 0) -> DualSolution:
    """Conditional dual minimization over the deflator polytope at ``t``.

    ``eta`` is a nonnegative scalar per time-t node.  eta = 0 returns the
    conditional expectation of the conjugate at 0 (+inf for log and for
    power utilities unbounded above), with the minimizer unconstrained.
    """
    tree = market.tree
    if not 0 <= t <= tree.n_periods:
        raise ValueError(f"start index {t} outside the grid")
    t_nodes = tree.levels[t]
    eta = np.broadcast_to(np.asarray(eta, dtype=float), t_nodes.shape).copy()
    if np.any(eta < 0):
        raise ValueError("eta must be nonnegative")

    zeta, factor = dual_factors(market, field)
    z = np.full(tree.n_nodes, np.nan)
    z[t_nodes] = 1.0
    for k in range(t, tree.n_periods):
        for n in tree.levels[k]:
            c = tree.children[n]
            z[c] = z[n] * zeta[c]

    is_log, gamma = _family(field)
    value = np.empty(t_nodes.size)
    for j, n in enumerate(t_nodes):
        if eta[j] > 0:
            if is_log:
                value[j] = -np.log(eta[j]) + factor[n]
            else:
                beta = 1.0 - 1.0 / gamma
                value[j] = factor[n] * eta[j] ** beta
        else:
            value[j] = field.v_at_zero()
    return DualSolution(market=market, field=field, t=t, eta=eta, value=value,
                        zeta=zeta, factor=factor, z=z)


# ---------------------------------------------------------------------------
# Matched primal/dual solutions
# ---------------------------------------------------------------------------

@dataclass
class DualitySolution:
    """Primal optimizer, conjugate-point dual pair, and both value processes."""

    primal: PrimalSolution
    dual: DualSolution
    eta_hat: np.ndarray

    @property
    def market(self) -> TreeMarket:
        return self.primal.market

    @property
    def t(self) -> int:
        return self.primal.t

    @property
    def xi(self) -> np.ndarray:
        return self.primal.xi

    @property
    def u_val(self) -> np.ndarray:
        return self.primal.value

    @property
    def v_val(self) -> np.ndarray:
        return self.dual.value


def solve_pair(market: TreeMarket, field, xi, t: int = 0) -> DualitySolution:
    """Solve the primal at ``xi`` and the dual at the conjugate point of xi."""
    primal = solve_primal(market, field, xi, t)
    if np.any(primal.xi <= 0):
        raise ValueError("matched solves need strictly positive capital")
    probe = solve_dual(market, field, 1.0, t)
    eta_hat = probe.conjugate_eta(primal.xi)
    dual = solve_dual(market, field, eta_hat, t)
    return DualitySolution(primal=primal, dual=dual, eta_hat=eta_hat)


# ---------------------------------------------------------------------------
# Certified checks
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    name: str
    passed: bool
    tolerances: dict
    gaps: dict
    details: dict = dc_field(default_factory=dict)


def _condexp_at(tree, leaf_values: np.ndarray, t: int) -> np.ndarray:
    full = tree.condexp_from_leaves(leaf_values)
    return full[tree.levels[t]]


def check_weak_duality(market: TreeMarket, field, xi, eta, t: int = 0,
                       tol: float = 1e-8) -> CheckReport:
    """Gap report for u(xi) <= v(eta) + xi eta per time-t node."""
    prim = solve_primal(market, field, xi, t)
    dual = solve_dual(market, field, eta, t)
    bound = dual.value + dual.eta * prim.xi
    with np.errstate(invalid="ignore"):
        gap = prim.value - bound
    gap = np.where(np.isnan(gap), -np.inf, gap)  # -inf <= anything
    max_gap = float(np.max(gap))
    return CheckReport(
        name="weak-duality",
        passed=bool(max_gap <= tol),
        tolerances={"gap": tol},
        gaps={"max_gap": max_gap},
        details={"t": t, "n_nodes": int(len(gap))},
    )


def _adaptive_extremum(fun, x0: float, minimize: bool, tol: float,
                       max_expand: int = 60):
    """Extremum of a unimodal function over (0, inf) by log-scale bracket
    expansion around x0 plus golden-section refinement.

    Returns (value, ok); ok degrades to False on bracket exhaustion, in
    which case the best value seen is reported.
    """
    sign = 1.0 if minimize else -1.0

    def g(u):
        return sign * fun(np.exp(u))

    u0 = np.log(x0)
    half = 1.0
    for _ in range(max_expand):
        lo, hi = u0 - half, u0 + half
        um = 0.5 * (lo + hi)
        if g(um) <= min(g(lo), g(hi)):
            break
        half *= 2.0
    else:
        return sign * g(u0), False
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = g(c), g(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = g(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = g(d)
    u = 0.5 * (a + b)
    return sign * g(u), True


def check_conjugacy(market: TreeMarket, field, t: int = 0, xi_ref=1.0,
                    eta_ref=None, tol: float = 1e-5) -> CheckReport:
    """Certify both conjugacy directions per time-t node:

        sup_xi (u(xi) - xi eta) = v(eta)     (searched on a log ray in xi)
        inf_eta (v(eta) + xi eta) = u(xi)    (searched on a log ray in eta)

    The searches bracket adaptively around the closed-form conjugate points;
    exhaustion is reported as failure carrying the best gap seen.
    """
    tree = market.tree
    t_nodes = tree.levels[t]
    prim = solve_primal(market, field, xi_ref, t)
    probe = solve_dual(market, field, 1.0, t)
    if eta_ref is None:
        eta_arr = probe.conjugate_eta(prim.xi)
    else:
        eta_arr = np.broadcast_to(np.asarray(eta_ref, dtype=float), t_nodes.shape)

    gaps_v = np.empty(t_nodes.size)
    gaps_u = np.empty(t_nodes.size)
    ok_all = True
    for j in range(t_nodes.size):
        eta_j = float(eta_arr[j])
        xi_j = float(prim.xi[j])

        def u_of(x, j=j):
            return solve_primal(market, field,
                                _unit(t_nodes.size, j, x), t).value[j]

        def v_of(e, j=j):
            return solve_dual(market, field,
                              _unit(t_nodes.size, j, e), t).value[j]

        v_j = v_of(eta_j)
        start = max(xi_j, 1e-8)
        sup_val, ok1 = _adaptive_extremum(lambda x: u_of(x) - x * eta_j,
                                          start, minimize=False, tol=1e-11)
        gaps_v[j] = abs(sup_val - v_j)

        u_j = u_of(xi_j)
        start_eta = max(float(eta_arr[j]), 1e-8)
        inf_val, ok2 = _adaptive_extremum(lambda e: v_of(e) + xi_j * e,
                                          start_eta, minimize=True, tol=1e-11)
        gaps_u[j] = abs(inf_val - u_j)
        ok_all = ok_all and ok1 and ok2

    max_gap_v = float(np.max(gaps_v))
    max_gap_u = float(np.max(gaps_u))
    return CheckReport(
        name="conjugacy",
        passed=bool(ok_all and max_gap_v <= tol and max_gap_u <= tol),
        tolerances={"gap": tol},
        gaps={"max_gap_conjugacy": max_gap_v, "max_gap_biconjugacy": max_gap_u},
        details={"t": t, "bracket_ok": ok_all},
    )


def _unit(size: int, j: int, value: float) -> np.ndarray:
    out = np.ones(size)
    out[j] = value
    return out


def check_optimality_relations(solution: DualitySolution,
                               tol_marginal: float = 1e-6,
                               tol_martingale: float = 1e-8) -> CheckReport:
    """First-order relations at matched optimizers, on {xi > 0}:

    the marginal utility of the optimal claim equals eta_hat z_T leaf by
    leaf, the claim inverts the conjugate's derivative, and rho z_T has
    conditional expectation exactly 1 (the maximality certificate of the
    deflator polytope).
    """
    market, t = solution.market, solution.t
    tree = market.tree
    field = solution.primal.field
    t_nodes = tree.levels[t]
    leaves = tree.leaves
    leaf_anc = np.array([tree.ancestor_at(int(l), t) for l in leaves])
    t_index = {int(n): j for j, n in enumerate(t_nodes)}
    leaf_slot = np.array([t_index[int(a)] for a in leaf_anc])

    xi_leaf = solution.xi[leaf_slot]
    eta_leaf = solution.eta_hat[leaf_slot]
    rho = solution.primal.rho
    z_T = solution.dual.z_terminal
    leaf_ids = np.arange(leaves.size)

    pos = xi_leaf > 0
    rel_err = 0.0
    inv_err = 0.0
    if np.any(pos):
        lhs = field.u_prime(xi_leaf[pos] * rho[pos], leaf_ids[pos])
        rhs = eta_leaf[pos] * z_T[pos]
        rel_err = float(np.max(np.abs(lhs - rhs) / rhs))
        claim = -np.asarray(field.v_prime(rhs, leaf_ids[pos]))
        inv_err = float(np.max(np.abs(claim - xi_leaf[pos] * rho[pos])
                               / np.maximum(claim, 1e-300)))

    cond = _condexp_at(tree, rho * z_T, t)
    pos_nodes = solution.xi > 0
    mart_err = float(np.max(np.abs(cond[pos_nodes] - 1.0))) if np.any(pos_nodes) else 0.0

    passed = rel_err <= tol_marginal and inv_err <= tol_marginal and mart_err <= tol_martingale
    return CheckReport(
        name="optimality-relations",
        passed=bool(passed),
        tolerances={"marginal_rel": tol_marginal, "martingale": tol_martingale},
        gaps={"marginal_rel_err": rel_err, "inverse_rel_err": inv_err,
              "martingale_err": mart_err},
        details={"t": t, "n_leaves": int(leaves.size)},
    )


# ---------------------------------------------------------------------------
# Claim and deflator containers
# ---------------------------------------------------------------------------

@dataclass
class AttainableClaimSet:
    """Claims attainable from unit capital at time index t, parametrized by
    per-node fractions on [t, T]; the set is solid (downward closed), so
    scaled-down members belong as well."""

    market: TreeMarket
    t: int

    def terminal_from_fractions(self, fraction: np.ndarray,
                                scale: float = 1.0) -> np.ndarray:
        if not 0.0 <= scale <= 1.0:
            raise ValueError("solid scaling needs scale in [0, 1]")
        tree = self.market.tree
        rel = np.full(tree.n_nodes, np.nan)
        rel[tree.levels[self.t]] = 1.0
        for k in range(self.t, tree.n_periods):
            for n in tree.levels[k]:
                c = tree.children[n]
                rel[c] = rel[n] * (1.0 + fraction[n] * self.market.dr0[c])
        out = rel[tree.leaves]
        if np.any(out < 0):
            raise ValueError("fractions leave the admissible set")
        return scale * out

    def sample(self, n: int, rng) -> np.ndarray:
        return sample_claims(self.market, self.t, n, rng)


@dataclass
class DeflatorElement:
    """Nonnegative process on [t, T] with value <= 1 at the time-t nodes;
    validation certifies the defining supermartingale inequalities against
    the extreme admissible one-step fractions."""

    market: TreeMarket
    t: int
    z: np.ndarray  # full node array, nan before t

    def validate(self, tol: float = 1e-10) -> float:
        """Largest constraint violation (<= tol means a valid deflator)."""
        tree = self.market.tree
        worst = float(np.max(self.z[tree.levels[self.t]]) - 1.0)
        if np.any(self.z[tree.levels[self.t]] < 0):
            worst = np.inf
        for k in range(self.t, tree.n_periods):
            for n in tree.levels[k]:
                c = tree.children[n]
                p = tree.branch_prob[c]
                dr = self.market.dr0[c]
                if np.any(self.z[c] < 0):
                    return np.inf
                if np.all(np.abs(dr) < _ZERO_RET):
                    hs = (0.0,)
                else:
                    h_lo, h_hi = self.market.fraction_bounds(n)
                    hs = (h_lo, 0.0, h_hi)
                for h in hs:
                    resid = float(np.dot(p, self.z[c] * (1.0 + h * dr))) - self.z[n]
                    worst = max(worst, resid)
        return worst

    @property
    def z_terminal(self) -> np.ndarray:
        return self.z[self.market.tree.leaves]


# ---------------------------------------------------------------------------
# Polar structure sampling
# ---------------------------------------------------------------------------

def node_polytope_vertices(p: np.ndarray, dr: np.ndarray, h_lo: float,
                           h_hi: float) -> list[np.ndarray]:
    """Vertices of the one-step deflator polytope {z >= 0, az <= 1, bz <= 1}."""
    m = p.size
    if np.all(np.abs(dr) < _ZERO_RET):
        rows = [np.asarray(p, dtype=float)]
    else:
        rows = [np.maximum(p * (1.0 + h_lo * dr), 0.0),
                np.maximum(p * (1.0 + h_hi * dr), 0.0)]
    eye = np.eye(m)
    cons = [(r, 1.0) for r in rows] + [(eye[c], 0.0) for c in range(m)]
    verts = [np.zeros(m)]
    for combo in itertools.combinations(range(len(cons)), m):
        mat = np.array([cons[i][0] for i in combo])
        rhs = np.array([cons[i][1] for i in combo])
        if abs(np.linalg.det(mat)) < 1e-12:
            continue
        v = np.linalg.solve(mat, rhs)
        if np.any(v < -1e-10):
            continue
        v = np.maximum(v, 0.0)
        if all(np.dot(r, v) <= 1.0 + 1e-10 for r in rows):
            verts.append(v)
    uniq = []
    for v in verts:
        if not any(np.allclose(v, u, atol=1e-12) for u in uniq):
            uniq.append(v)
    return uniq


def sample_claims(market: TreeMarket, t: int, n: int, rng) -> np.ndarray:
    """Random elements of the attainable-claim set: terminal wealth of
    admissible strategies from unit capital at t, optionally scaled down
    (the set is solid)."""
    tree = market.tree
    out = np.empty((n, tree.leaves.size))
    for s in range(n):
        rel = np.full(tree.n_nodes, np.nan)
        rel[tree.levels[t]] = 1.0
        for k in range(t, tree.n_periods):
            for node in tree.levels[k]:
                c = tree.children[node]
                dr = market.dr0[c]
                if np.all(np.abs(dr) < _ZERO_RET):
                    h = 0.0
                else:
                    h_lo, h_hi = market.fraction_bounds(node)
                    u = rng.uniform(0.02, 0.98)
                    h = h_lo + u * (h_hi - h_lo)
                rel[c] = rel[node] * (1.0 + h * dr)
        scale = 1.0 if rng.uniform() < 0.5 else rng.uniform(0.3, 1.0)
        out[s] = scale * rel[tree.leaves]
    return out


def sample_deflators(market: TreeMarket, t: int, n: int, rng,
                     extreme: bool = False) -> np.ndarray:
    """Random supermartingale deflators on [t, T] as terminal values z_T
    (with z_t <= 1), built from per-node points of the one-step polytope."""
    tree = market.tree
    out = np.empty((n, tree.leaves.size))
    vertex_cache = {}
    for s in range(n):
        z = np.full(tree.n_nodes, np.nan)
        z[tree.levels[t]] = 1.0 if extreme else rng.uniform(0.7, 1.0)
        for k in range(t, tree.n_periods):
            for node in tree.levels[k]:
                c = tree.children[node]
                p = tree.branch_prob[c]
                dr = market.dr0[c]
                if np.all(np.abs(dr) < _ZERO_RET):
                    h_lo = h_hi = 0.0
                else:
                    h_lo, h_hi = market.fraction_bounds(node)
                if node not in vertex_cache:
                    vertex_cache[node] = node_polytope_vertices(p, dr, h_lo, h_hi)
                verts = vertex_cache[node]
                if extreme:
                    zeta = verts[rng.integers(len(verts))]
                else:
                    w = rng.dirichlet(np.ones(len(verts)))
                    zeta = sum(wi * vi for wi, vi in zip(w, verts))
                z[c] = z[node] * zeta
        out[s] = z[tree.leaves]
    return out


def check_polarity(market: TreeMarket, t: int = 0, n_samples: int = 40,
                   seed: int = 0, tol: float = 1e-10) -> CheckReport:
    """Sampled polarity of claims and deflators: E_t[rho z_T] <= 1 for all
    sampled pairs, strictly positive members exist on both sides, and an
    upscaled claim violates the bound against some deflator."""
    rng = np.random.default_rng(seed)
    tree = market.tree
    claims = sample_claims(market, t, n_samples, rng)
    defl = np.vstack([
        sample_deflators(market, t, n_samples // 2, rng, extreme=True),
        sample_deflators(market, t, n_samples - n_samples // 2, rng, extreme=False),
    ])

    worst = -np.inf
    for rho in claims:
        for z in defl:
            worst = max(worst, float(np.max(_condexp_at(tree, rho * z, t))))
    bound_ok = worst <= 1.0 + tol

    # strictly positive members: hold-cash claim, martingale-branch deflator
    ones = np.ones(tree.leaves.size)
    pos_claim_ok = bool(np.all(ones > 0))
    pos_defl = _martingale_deflator(market, t)
    pos_defl_ok = bool(np.all(pos_defl > 0))

    # a claim scaled above attainability must be caught by some deflator
    scaled = 1.5 * ones
    worst_scaled = -np.inf
    for z in np.vstack([defl, pos_defl[None, :]]):
        worst_scaled = max(worst_scaled, float(np.max(_condexp_at(tree, scaled * z, t))))
    violation_detected = worst_scaled > 1.0 + tol

    passed = bound_ok and pos_claim_ok and pos_defl_ok and violation_detected
    return CheckReport(
        name="polarity",
        passed=bool(passed),
        tolerances={"polar_bound": tol},
        gaps={"max_pairing": worst, "scaled_pairing": worst_scaled},
        details={"t": t, "n_claims": int(claims.shape[0]),
                 "n_deflators": int(defl.shape[0]),
                 "positive_members": pos_claim_ok and pos_defl_ok,
                 "scaled_violation_detected": bool(violation_detected)},
    )


def _martingale_deflator(market: TreeMarket, t: int) -> np.ndarray:
    """Strictly positive deflator with E_n[zeta (1 + h dR)] = 1 for every h:
    the both-constraints-active point of each one-step polytope."""
    tree = market.tree
    z = np.full(tree.n_nodes, np.nan)
    z[tree.levels[t]] = 1.0
    for k in range(t, tree.n_periods):
        for node in tree.levels[k]:
            c = tree.children[node]
            p = tree.branch_prob[c]
            dr = market.dr0[c]
            if np.all(np.abs(dr) < _ZERO_RET):
                zeta = np.ones(len(c))
            else:
                # solve sum p zeta = 1, sum p zeta dr = 0 (minimum norm)
                mat = np.array([p, p * dr])
                zeta, *_ = np.linalg.lstsq(mat, np.array([1.0, 0.0]), rcond=None)
                if np.any(zeta <= 0):
                    # fall back to an interior feasible point
                    h_lo, h_hi = market.fraction_bounds(node)
                    a = np.maximum(p * (1.0 + h_lo * dr), 0.0)
                    b = np.maximum(p * (1.0 + h_hi * dr), 0.0)
                    zeta = np.ones(len(c)) / float(np.max(a + b))
            z[c] = z[node] * zeta
    return z[tree.leaves]
