"""Indirect-utility process under perturbation and its first-order
derivative at eps = 0.

Three evaluation routes for J_t(eps), the conditional value of the best
attainable terminal utility given the wealth a fixed proportional strategy
produced up to t in the eps-market:

* ``tree``: exact backward solves on the perturbed tree market;
* ``closed form``: constant-coefficient Brownian market with CRRA or log
  utility, where the continuation value, its wealth marginal, and the
  tilted expectation in the derivative all have explicit expressions;
* ``nested Monte Carlo``: shared path prefixes up to t, then per-prefix
  conditional averages over inner continuation paths driven by the
  eps-optimal fraction.  Common random numbers are used across eps; there
  is no regression step, so the per-prefix values are plain unbiased
  conditional estimates.

The derivative formula evaluated here is

    X_t eta_t ( (psi pi - lam theta) . M^R_t + E-tilde_t[ (lam theta) . R0_T ] )

with M^R = R0 - pi . <R0> and the expectation taken under the tilt whose
density after t is the conditional expectation of rho z_T from the matched
base-market solution.  Finite differences with Richardson extrapolation
validate it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .duality import DualitySolution, solve_pair, solve_primal
from .lattice import TreeProcess, counter_normals, stochastic_integral, tree_control
from .market import TreeMarket
from .perturbation import PerturbationSpec, perturbed_market, tilted_measure_tree

__all__ = [
    "ClosedFormMerton",
    "IndirectUtilityPoint",
    "McDraws",
    "indirect_utility_tree",
    "indirect_utility_mc",
    "derivative_formula_tree",
    "finite_difference_derivative",
    "continuity_check",
]


@dataclass
class IndirectUtilityPoint:
    """J_t(eps) per time-t node (tree) or per path prefix (Monte Carlo)."""

    t: float
    eps: float
    values: np.ndarray
    se: np.ndarray | None
    method: str


@dataclass
class SensitivityReport:
    """Everything measured about dJ_t/deps at one t: the formula value, the
    central difference at each eps level, the extrapolated limit, and the
    continuity slopes of the accompanying sweep."""

    t: float
    formula: float
    fd_central: dict
    fd_extrapolated: float
    fd_error_bar: float
    continuity_slopes: dict
    passed: bool


# ---------------------------------------------------------------------------
# Closed forms for the constant-coefficient Brownian market
# ---------------------------------------------------------------------------

@dataclass
class ClosedFormMerton:
    """Constant-coefficient market dR0 = sigma dW + lam sigma^2 dt with CRRA
    (gamma != 1) or log (gamma = 1) utility, a constant strategy fraction pi
    and a constant-direction perturbation.

    The eps-market has volatility (1 + eps psi) sigma and market price of
    risk (per volatility unit) lam sigma (1 + eps theta); its optimal
    continuation value, reached by the fraction
    lam (1 + eps theta) / (gamma (1 + eps psi)), scales the utility of
    current wealth by a deterministic horizon factor.
    """

    sigma: float
    lam: float
    horizon: float
    gamma: float
    pi: float
    x0: float
    psi: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0 or self.horizon <= 0 or self.gamma <= 0:
            raise ValueError("sigma, horizon and gamma must be positive")

    @property
    def is_log(self) -> bool:
        return self.gamma == 1.0

    def utility(self, x):
        if self.is_log:
            return np.log(x)
        return x ** (1.0 - self.gamma) / (1.0 - self.gamma)

    def sigma_eps(self, eps: float) -> float:
        return self.sigma * (1.0 + eps * self.psi)

    def mu_eps(self, eps: float) -> float:
        return self.lam * self.sigma ** 2 * (1.0 + eps * self.psi) * (1.0 + eps * self.theta)

    def mpr_eps(self, eps: float) -> float:
        """Market price of risk per unit volatility in the eps-market."""
        return self.lam * self.sigma * (1.0 + eps * self.theta)

    def merton_fraction(self, eps: float = 0.0) -> float:
        return self.lam * (1.0 + eps * self.theta) / (self.gamma * (1.0 + eps * self.psi))

    def value(self, x, t: float, eps: float = 0.0):
        """Optimal continuation value in the eps-market at wealth x."""
        horizon = self.horizon - t
        rate = self.mpr_eps(eps) ** 2 * horizon
        if self.is_log:
            return np.log(x) + 0.5 * rate
        g = self.gamma
        return self.utility(x) * np.exp((1.0 - g) * rate / (2.0 * g))

    def marginal(self, x, t: float, eps: float = 0.0):
        """d(value)/dx; at eps = 0 this is the conjugate point eta_t."""
        horizon = self.horizon - t
        rate = self.mpr_eps(eps) ** 2 * horizon
        if self.is_log:
            return 1.0 / np.asarray(x, dtype=float)
        g = self.gamma
        return np.asarray(x, dtype=float) ** (-g) * np.exp((1.0 - g) * rate / (2.0 * g))

    # -- fixed-strategy wealth along a Brownian level -----------------------

    def wealth_at(self, w, t: float, eps: float = 0.0):
        """X_t of the fixed fraction pi in the eps-market, given W_t = w
        (exact lognormal; no discretization)."""
        s, m = self.sigma_eps(eps), self.mu_eps(eps)
        drift = (self.pi * m - 0.5 * self.pi ** 2 * s ** 2) * t
        return self.x0 * np.exp(drift + self.pi * s * np.asarray(w, dtype=float))

    def r0_at(self, w, t: float):
        return self.sigma * np.asarray(w, dtype=float) + self.lam * self.sigma ** 2 * t

    def m_r_at(self, w, t: float):
        """M^R_t = R0_t - pi <R0>_t along the Brownian level."""
        return self.r0_at(w, t) - self.pi * self.sigma ** 2 * t

    def tilted_shift(self) -> float:
        """Drift the tilt adds to W per unit time after t: the density of
        the tilt is the exponential martingale with rate -(1 - 1/gamma)
        times the market price of risk."""
        beta = 1.0 - 1.0 / self.gamma
        return -beta * self.lam * self.sigma

    def tilted_term(self, w, t: float):
        """E-tilde_t[(lam theta) . R0_T]: the accumulated part plus the
        shifted-Gaussian mean of the remaining increment."""
        lt = self.lam * self.theta
        head = lt * self.r0_at(w, t)
        tail = lt * (self.sigma * self.tilted_shift() + self.lam * self.sigma ** 2) \
            * (self.horizon - t)
        return head + tail

    def derivative(self, w, t: float):
        """The first-order derivative of J_t(eps) at eps = 0 along W_t = w."""
        x_t = self.wealth_at(w, t, 0.0)
        eta = self.marginal(x_t, t, 0.0)
        pre = (self.psi * self.pi - self.lam * self.theta) * self.m_r_at(w, t)
        return x_t * eta * (pre + self.tilted_term(w, t))

    def j_closed(self, w, t: float, eps: float):
        """J_t(eps) along W_t = w: continuation value of the eps-wealth."""
        return self.value(self.wealth_at(w, t, eps), t, eps)


# ---------------------------------------------------------------------------
# Monte Carlo evaluation with common random numbers
# ---------------------------------------------------------------------------

@dataclass
class McDraws:
    """Shared standard normal draws: one prefix level per outer row, one
    inner continuation panel per prefix.  Reusing the same object across
    eps values is what makes the finite differences common-random-number."""

    seed: int
    n_outer: int
    n_inner: int
    t: float
    horizon: float
    z_outer: np.ndarray
    z_inner: np.ndarray

    @classmethod
    def generate(cls, seed: int, n_outer: int, n_inner: int, t: float,
                 horizon: float) -> "McDraws":
        if not 0 <= t <= horizon:
            raise ValueError("need 0 <= t <= horizon")
        z_outer = counter_normals(seed, n_outer, 1, stream=1)[:, 0]
        if t == 0.0:
            z_outer = np.zeros(n_outer)
        z_inner = counter_normals(seed, n_outer, n_inner, stream=2)
        return cls(seed=seed, n_outer=n_outer, n_inner=n_inner, t=t,
                   horizon=horizon, z_outer=z_outer, z_inner=z_inner)

    @property
    def w_t(self) -> np.ndarray:
        return np.sqrt(self.t) * self.z_outer

    @property
    def dw(self) -> np.ndarray:
        return np.sqrt(self.horizon - self.t) * self.z_inner


def indirect_utility_mc(cf: ClosedFormMerton, draws: McDraws,
                        eps: float) -> IndirectUtilityPoint:
    """Nested estimate of J_t(eps): per shared prefix, the average terminal
    utility of the eps-optimal continuation over the inner panel."""
    t, horizon = draws.t, draws.horizon
    tau = horizon - t
    x_t = cf.wealth_at(draws.w_t, t, eps)
    pi_star = cf.merton_fraction(eps)
    s, m = cf.sigma_eps(eps), cf.mu_eps(eps)
    drift = (pi_star * m - 0.5 * pi_star ** 2 * s ** 2) * tau
    x_T = x_t[:, None] * np.exp(drift + pi_star * s * draws.dw)
    u = cf.utility(x_T)
    values = u.mean(axis=1)
    se = u.std(axis=1, ddof=1) / np.sqrt(draws.n_inner)
    return IndirectUtilityPoint(t=t, eps=eps, values=values, se=se, method="mc_nested")


def tilted_term_mc(cf: ClosedFormMerton, draws: McDraws):
    """Density-weighted inner estimate of the tilted expectation in the
    derivative (per prefix, with a standard error); the closed form is its
    oracle."""
    t, horizon = draws.t, draws.horizon
    tau = horizon - t
    shift = cf.tilted_shift()
    # Girsanov kernel of the tilt against the Brownian increment after t
    if tau > 0:
        dens = np.exp(shift * draws.dw - 0.5 * shift ** 2 * tau)
    else:
        dens = np.ones_like(draws.z_inner)
    lt = cf.lam * cf.theta
    tail = lt * (cf.sigma * draws.dw + cf.lam * cf.sigma ** 2 * tau)
    weighted = dens * tail
    head = lt * cf.r0_at(draws.w_t, t)
    est = head + weighted.mean(axis=1)
    se = weighted.std(axis=1, ddof=1) / np.sqrt(draws.n_inner)
    return est, se


# ---------------------------------------------------------------------------
# Exact tree evaluation
# ---------------------------------------------------------------------------

def indirect_utility_tree(market: TreeMarket, field, spec: PerturbationSpec,
                          pi, x0: float, t: int, eps: float) -> IndirectUtilityPoint:
    """J at time index t on the perturbed tree: wealth of the fixed fraction
    in the eps-market, then an exact backward solve from t."""
    mkt_eps = perturbed_market(market, spec, eps)
    x = mkt_eps.wealth(pi, x0=x0)
    xi = x.values[market.tree.levels[t]]
    sol = solve_primal(mkt_eps, field, xi, t)
    return IndirectUtilityPoint(t=float(market.tree.times.times[t]), eps=eps,
                                values=sol.value, se=None, method="tree_exact")


def derivative_formula_tree(market: TreeMarket, field, spec: PerturbationSpec,
                            pi, x0: float, t: int,
                            solution: DualitySolution | None = None) -> np.ndarray:
    """The derivative formula per time-t node from exact tree quantities.

    The dual pair at the conjugate point supplies eta_t and the tilt; the
    pre-t stochastic integral and the tilted expectation are exact sums.
    """
    tree = market.tree
    x = market.wealth(pi, x0=x0)
    xi = x.values[tree.levels[t]]
    sol = solution if solution is not None else solve_pair(market, field, xi, t)
    if sol.t != t or not np.allclose(sol.xi, xi):
        raise ValueError("duality solution does not match (strategy, t)")
    eta = sol.eta_hat
    tilt = tilted_measure_tree(sol)

    theta = tree_control(tree, spec.theta)
    psi = tree_control(tree, spec.psi)
    pi_c = tree_control(tree, pi)
    lam_theta = market.lam * theta

    g_full = stochastic_integral(lam_theta, market.r0)         # (lam theta) . R0
    tilted = tilt.expect(g_full.values[tree.leaves])

    drift = stochastic_integral(pi_c, market.qv)
    m_r = TreeProcess(tree, market.r0.values - drift.values)
    pre = stochastic_integral(psi * pi_c - lam_theta, m_r)
    pre_t = pre.values[tree.levels[t]]

    return xi * eta * (pre_t + tilted)


# ---------------------------------------------------------------------------
# Finite differences and continuity
# ---------------------------------------------------------------------------

@dataclass
class FdEstimate:
    value: np.ndarray
    extrapolation_spread: np.ndarray
    central: dict
    levels: list


def finite_difference_derivative(j_by_eps: dict, atol: float = 0.0) -> FdEstimate:
    """Richardson-extrapolated central differences from a symmetric eps grid.

    ``j_by_eps`` maps eps to values (arrays share a shape); the grid must
    contain matching +/- pairs with each level half the previous one.  The
    ladder is exact on cubics per stage, so a quadratic J returns its slope
    up to rounding; the spread between the last two extrapolants is the
    reported truncation estimate.
    """
    eps_pos = sorted({e for e in j_by_eps if e > 0}, reverse=True)
    if not eps_pos:
        raise ValueError("need at least one +/- eps pair")
    for e in eps_pos:
        if -e not in j_by_eps:
            raise ValueError(f"eps grid is not symmetric: missing {-e}")
    for a, b in zip(eps_pos, eps_pos[1:]):
        if abs(a / b - 2.0) > 1e-12:
            raise ValueError("eps levels must halve for the Richardson ladder")

    central = {}
    for e in eps_pos:
        central[e] = (np.asarray(j_by_eps[e], dtype=float)
                      - np.asarray(j_by_eps[-e], dtype=float)) / (2.0 * e)
    ladder = [central[e] for e in eps_pos]
    order = 2
    while len(ladder) > 1:
        w = 4.0 ** (order // 2)
        ladder = [(w * fine - coarse) / (w - 1.0)
                  for coarse, fine in zip(ladder, ladder[1:])]
        order += 2
    prev = central[eps_pos[-1]] if len(eps_pos) == 1 else _pre_final(central, eps_pos)
    value = ladder[0]
    spread = np.abs(value - prev) + atol
    return FdEstimate(value=value, extrapolation_spread=spread,
                      central={e: c for e, c in central.items()}, levels=eps_pos)


def _pre_final(central: dict, eps_pos: list) -> np.ndarray:
    """The extrapolant using every level but the finest (spread reference)."""
    ladder = [central[e] for e in eps_pos[:-1]]
    order = 2
    while len(ladder) > 1:
        w = 4.0 ** (order // 2)
        ladder = [(w * fine - coarse) / (w - 1.0)
                  for coarse, fine in zip(ladder, ladder[1:])]
        order += 2
    return ladder[0]


@dataclass
class ContinuityReport:
    name: str
    passed: bool
    slopes: dict
    ratios: list
    band: tuple
    details: dict


def continuity_check(j_by_eps: dict, band: tuple = (0.75, 1.25),
                     slope_atol: float = 1e-14) -> ContinuityReport:
    """Difference-quotient stability across eps halvings.

    For each halving pair the elementwise ratio of |J(eps) - J(0)| / |eps|
    must stay inside ``band``; slopes below ``slope_atol`` are treated as
    matching (exactly flat directions).  The sweep must contain eps = 0.
    """
    if 0.0 not in j_by_eps:
        raise ValueError("continuity sweep needs the eps = 0 entry")
    j0 = np.asarray(j_by_eps[0.0], dtype=float)
    eps_pos = sorted({abs(e) for e in j_by_eps if e != 0.0}, reverse=True)
    slopes = {}
    for e in eps_pos:
        for s in (e, -e):
            if s in j_by_eps:
                slopes[s] = np.abs(np.asarray(j_by_eps[s], dtype=float) - j0) / e
    ratios = []
    worst = 0.0
    ok = True
    for a, b in zip(eps_pos, eps_pos[1:]):
        if abs(a / b - 2.0) > 1e-12:
            continue
        for sign in (1.0, -1.0):
            if sign * a in slopes and sign * b in slopes:
                num, den = slopes[sign * b], slopes[sign * a]
                tiny = (num <= slope_atol) & (den <= slope_atol)
                ratio = np.where(tiny, 1.0, num / np.where(den > 0, den, np.inf))
                ratios.append(float(np.median(ratio)))
                dev = float(np.max(np.abs(ratio - 1.0)))
                worst = max(worst, dev)
                ok = ok and bool(np.all((ratio >= band[0]) & (ratio <= band[1])))
    return ContinuityReport(
        name="continuity",
        passed=ok,
        slopes={float(k): float(np.mean(v)) for k, v in slopes.items()},
        ratios=ratios,
        band=band,
        details={"max_ratio_deviation": worst},
    )
