"""Perturbed-market machinery.

A perturbation jointly scales the martingale part of the risky return and
tilts its drift:

    multiplicative:  R_eps = (1 + eps psi) . (M + lam (1 + eps theta) . <M>)
    additive:        R_eps = (1 + eps psi) . M + (lam + eps nu) . <M>

with psi, theta (and nu) predictable and |psi| uniformly bounded.  The
additive variant exists to validate that both parametrizations produce the
same first-order behaviour once nu is matched; the multiplicative one is
the default everywhere.

The correction process L_eps is the stochastic exponential of
(-eps lam theta) . R0; it is a unit-capital wealth process in the base
market and links perturbed to base wealth.  On ensembles it is computed in
exponential form, so its derivative in eps is available pathwise in closed
form; on trees it is multiplicative, so deflator inequalities are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import (
    PathProcess,
    TreeProcess,
    quadratic_variation,
    stochastic_exponential,
    stochastic_integral,
    path_control,
    tree_control,
)
from .market import BrownianMarket, TreeMarket

__all__ = [
    "PerturbationSpec",
    "CorrectionProcess",
    "TiltedMeasure",
    "perturbed_market",
    "perturbed_return_paths",
    "correction_process",
    "wealth_decomposition_check",
    "tilted_measure_tree",
    "nupbr_deflator_check",
    "integrability_probe",
]


@dataclass(frozen=True)
class PerturbationSpec:
    """Direction of a market perturbation.

    ``psi`` scales the martingale part, ``theta`` tilts the drift relative
    to lam (multiplicative variant); ``nu`` is the absolute drift direction
    of the additive variant.  The size eps is supplied per call (run
    configurations carry an eps grid, not a single eps).
    """

    psi: float | np.ndarray = 0.0
    theta: float | np.ndarray = 0.0
    variant: str = "multiplicative"
    nu: float | np.ndarray | None = None
    psi_max: float | None = None

    def __post_init__(self):
        if self.variant not in ("multiplicative", "additive"):
            raise ValueError(f"unknown perturbation variant {self.variant!r}")
        if self.variant == "additive" and self.nu is None:
            raise ValueError("the additive variant needs nu")
        bound = self.psi_bound
        if not np.isfinite(bound):
            raise ValueError("|psi| must be uniformly bounded")
        if self.psi_max is not None and bound > self.psi_max + 1e-15:
            raise ValueError(f"|psi| exceeds the declared bound {self.psi_max}")

    @property
    def psi_bound(self) -> float:
        return float(np.max(np.abs(self.psi)))

    def eps_neighborhood(self) -> float:
        """Default |eps| range keeping 1 + eps psi away from 0."""
        b = self.psi_bound
        return min(0.1, 0.5 / b) if b > 0 else 0.1

    def check_eps(self, eps: float) -> None:
        if np.any(1.0 + eps * np.asarray(self.psi) <= 0.0):
            raise ValueError(f"eps = {eps} makes 1 + eps psi nonpositive")


# ---------------------------------------------------------------------------
# Perturbed returns
# ---------------------------------------------------------------------------

def perturbed_market(market: TreeMarket, spec: PerturbationSpec, eps: float) -> TreeMarket:
    """Tree market whose return process is R_eps, branch for branch.

    The perturbed driver is (1 + eps psi) dM (a martingale again) and the
    price of risk maps to lam (1 + eps theta) / (1 + eps psi) so that the
    drift against the perturbed bracket reproduces
    (1 + eps psi)(1 + eps theta) lam d<M> exactly.  eps = 0 returns
    bit-identical branch returns.
    """
    spec.check_eps(eps)
    tree = market.tree
    psi = tree_control(tree, spec.psi)
    dm = market.dm * (1.0 + eps * psi[np.maximum(tree.parent, 0)])
    if spec.variant == "multiplicative":
        theta = tree_control(tree, spec.theta)
        lam = market.lam * (1.0 + eps * theta) / (1.0 + eps * psi)
    else:
        nu = tree_control(tree, spec.nu)
        lam = (market.lam + eps * nu) / (1.0 + eps * psi) ** 2
    return TreeMarket(tree, dm, lam, utility_weights=market.utility_weights)


def perturbed_return_paths(bmarket: BrownianMarket, spec: PerturbationSpec,
                           eps: float) -> PathProcess:
    """R_eps on an ensemble, with the realized bracket of the base driver
    (consistent with the base return convention on ensembles).

    The martingale part and the drift part are accumulated separately, in
    the same order the base return uses, so eps = 0 reproduces the base
    return bit for bit.
    """
    spec.check_eps(eps)
    times = bmarket.times
    n = bmarket.ensemble.n_paths
    dm = bmarket.sigma * bmarket.ensemble.increments
    dq = dm ** 2
    psi = path_control(times, n, spec.psi)
    if spec.variant == "multiplicative":
        theta = path_control(times, n, spec.theta)
        dm_part = (1.0 + eps * psi) * dm
        dq_part = (1.0 + eps * psi) * (bmarket.lam * (1.0 + eps * theta)) * dq
    else:
        nu = path_control(times, n, spec.nu)
        dm_part = (1.0 + eps * psi) * dm
        dq_part = (bmarket.lam + eps * nu) * dq
    vals = np.zeros((n, times.n_steps + 1))
    np.cumsum(dm_part, axis=1, out=vals[:, 1:])
    drift = np.cumsum(dq_part, axis=1)
    vals[:, 1:] += drift
    return PathProcess(times, vals)


def matched_nu(lam, psi, theta, eps: float):
    """Drift direction that makes the additive variant coincide with the
    multiplicative one at this eps."""
    return lam * (psi + theta * (1.0 + eps * psi))


# ---------------------------------------------------------------------------
# Correction process
# ---------------------------------------------------------------------------

@dataclass
class CorrectionProcess:
    """L_eps together with the auxiliary return it is driven by.

    ``r_bar`` is (lam theta) . R0, ``qv_bar`` its bracket, and
    ``terminal_f`` the driving terminal value F = -r_bar_T.  On ensembles
    ``l_process`` uses the exponential form, hence
    dL/deps = L (-r_bar - eps qv_bar) holds pathwise and exactly.
    """

    eps: float
    l_process: object
    r_bar: object
    qv_bar: object
    variant: str

    @property
    def terminal_f(self):
        if isinstance(self.r_bar, TreeProcess):
            return -self.r_bar.values[self.r_bar.tree.leaves]
        return -self.r_bar.terminal

    def l_derivative_terminal(self):
        """dL_T/deps from the closed exponential form (ensembles)."""
        if self.variant != "exponential":
            raise ValueError("the pathwise derivative needs the exponential form")
        lt = self.l_process.terminal
        return lt * (-self.r_bar.terminal - self.eps * self.qv_bar.terminal)

    def inv_l_derivative_terminal(self):
        """d(1/L_T)/deps from the closed exponential form (ensembles)."""
        if self.variant != "exponential":
            raise ValueError("the pathwise derivative needs the exponential form")
        lt = self.l_process.terminal
        return (self.r_bar.terminal + self.eps * self.qv_bar.terminal) / lt


def correction_process(model, spec: PerturbationSpec, eps: float) -> CorrectionProcess:
    """L_eps = stochastic exponential of (-eps lam theta) . R0.

    Multiplicative on trees (deflator algebra stays exact), exponential on
    ensembles (pathwise derivative identities stay exact).
    """
    spec.check_eps(eps)
    if isinstance(model, TreeMarket):
        theta = tree_control(model.tree, spec.theta)
        lam_theta = model.lam * theta
        r_bar = stochastic_integral(lam_theta, model.r0)
        qv_bar = quadratic_variation(r_bar, mode="predictable")
        driver = TreeProcess(model.tree, -eps * r_bar.values)
        l_proc = stochastic_exponential(driver, variant="multiplicative")
        return CorrectionProcess(eps=eps, l_process=l_proc, r_bar=r_bar,
                                 qv_bar=qv_bar, variant="multiplicative")
    if isinstance(model, BrownianMarket):
        r0 = model.return_process()
        lam_theta = path_control(model.times, model.ensemble.n_paths,
                                 np.asarray(spec.theta) * model.lam)
        r_bar = stochastic_integral(lam_theta, r0)
        qv_bar = quadratic_variation(r_bar, mode="realized")
        l_vals = np.exp(-eps * r_bar.values - 0.5 * eps ** 2 * qv_bar.values)
        return CorrectionProcess(eps=eps, l_process=PathProcess(model.times, l_vals),
                                 r_bar=r_bar, qv_bar=qv_bar, variant="exponential")
    raise TypeError("expected a TreeMarket or BrownianMarket")


# ---------------------------------------------------------------------------
# Wealth decomposition (perturbed wealth = base wealth * correction ratio)
# ---------------------------------------------------------------------------

def _decomposition_error(bmarket: BrownianMarket, spec: PerturbationSpec,
                         pi: float, x0: float, eps: float) -> np.ndarray:
    """Per-path sup over the grid of the relative gap between perturbed
    wealth and base wealth times E(eps (psi pi - lam theta) . M^R) / L_eps."""
    times = bmarket.times
    n = bmarket.ensemble.n_paths
    r0 = bmarket.return_process()
    r_eps = perturbed_return_paths(bmarket, spec, eps)

    x_base = bmarket.wealth(pi, x0=x0, r=r0)
    factors = 1.0 + pi * r_eps.increments()
    if np.any(factors <= 0.0):
        raise ValueError("pi is not admissible for this eps: wealth hits zero")
    x_pert = bmarket.wealth(pi, x0=x0, r=r_eps)

    qv0 = quadratic_variation(r0, mode="realized")
    drift = stochastic_integral(pi, qv0)
    m_r = PathProcess(times, r0.values - drift.values)
    psi = path_control(times, n, spec.psi)
    theta = path_control(times, n, spec.theta)
    integrand = psi * pi - bmarket.lam * theta
    core = stochastic_integral(integrand, m_r)
    qv_core = quadratic_variation(core, mode="realized")
    corr = np.exp(eps * core.values - 0.5 * eps ** 2 * qv_core.values)

    l_eps = correction_process(bmarket, spec, eps).l_process.values
    recon = x_base.values * corr / l_eps
    rel = np.abs(x_pert.values - recon) / x_base.values
    return rel.max(axis=1)


@dataclass
class ConvergenceReport:
    name: str
    dts: list
    mean_errors: list
    ratios: list
    ratio_band: tuple
    passed: bool
    details: dict


def wealth_decomposition_check(bmarket_fine: BrownianMarket, spec: PerturbationSpec,
                               pi: float, x0: float, eps: float, n_levels: int = 3,
                               ratio_band: tuple = (0.35, 0.65)) -> ConvergenceReport:
    """First-order convergence of the wealth decomposition under grid halving.

    The finest ensemble is coarsened by powers of two, so every level sees
    the same Brownian path.  eps = 0 reproduces the base wealth exactly.
    """
    ens = bmarket_fine.ensemble
    levels = []
    for j in range(n_levels):
        factor = 2 ** (n_levels - 1 - j)
        levels.append(ens.coarsened(factor) if factor > 1 else ens)
    dts, errs = [], []
    for lev in levels:
        bm = BrownianMarket(sigma=bmarket_fine.sigma, lam=bmarket_fine.lam, ensemble=lev)
        e = _decomposition_error(bm, spec, pi, x0, eps)
        dts.append(float(np.max(lev.times.dt)))
        errs.append(float(np.mean(e)))
    ratios = [errs[j + 1] / errs[j] if errs[j] > 0 else 0.0 for j in range(len(errs) - 1)]
    if eps == 0.0:
        passed = all(e == 0.0 for e in errs)
    else:
        passed = all(ratio_band[0] <= r <= ratio_band[1] for r in ratios)
    return ConvergenceReport(
        name="wealth-decomposition",
        dts=dts, mean_errors=errs, ratios=ratios, ratio_band=ratio_band,
        passed=bool(passed),
        details={"eps": eps, "pi": pi, "n_paths": ens.n_paths},
    )


# ---------------------------------------------------------------------------
# Tilted measure
# ---------------------------------------------------------------------------

class TiltedMeasure:
    """Probability tilt whose density after t is E_s[rho z_T].

    ``leaf_weights`` (trees) or ``path_weights`` (ensembles) hold the
    terminal density; conditional expectations under the tilt are density
    -weighted conditional sums.  Construction validates that the density
    integrates to one conditionally on every time-t node.
    """

    def __init__(self, weights: np.ndarray, tree=None, t: int = 0,
                 tol: float = 1e-8):
        self.t = t
        self.tree = tree
        self.weights = np.asarray(weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("tilted density must be nonnegative")
        if tree is not None:
            cond = tree.condexp_from_leaves(self.weights)[tree.levels[t]]
            err = float(np.max(np.abs(cond - 1.0)))
        else:
            err = abs(float(np.mean(self.weights)) - 1.0)
        if err > tol:
            raise ValueError(
                f"terminal density misses conditional mass 1 by {err:.3e}"
            )
        self.normalization_error = err

    def expect(self, terminal_values: np.ndarray):
        """E under the tilt given time-t information: per time-t node on a
        tree, a scalar weighted mean on an ensemble."""
        tv = np.asarray(terminal_values, dtype=float)
        if self.tree is not None:
            cond = self.tree.condexp_from_leaves(self.weights * tv)
            return cond[self.tree.levels[self.t]]
        return float(np.mean(self.weights * tv))

    def density_process_tree(self):
        """Full density process: 1 before t, E_s[rho z_T] from t on."""
        tree = self.tree
        dens = tree.condexp_from_leaves(self.weights)
        for k in range(self.t):
            dens[tree.levels[k]] = 1.0
        return TreeProcess(tree, dens)


def tilted_measure_tree(solution, tol: float = 1e-8) -> TiltedMeasure:
    """Tilt built from a matched tree solution: density rho z_T.

    Rejected if the conditional-mass identity E_t[rho z_T] = 1 fails beyond
    tolerance (it certifies the solution before any tilt is trusted).
    """
    tree = solution.market.tree
    weights = solution.primal.rho * solution.dual.z_terminal
    return TiltedMeasure(weights, tree=tree, t=solution.t, tol=tol)


# ---------------------------------------------------------------------------
# Deflator certificates under perturbation
# ---------------------------------------------------------------------------

@dataclass
class DeflatorReport:
    name: str
    passed: bool
    eps_grid: list
    max_residual: float
    details: dict


def nupbr_deflator_check(market: TreeMarket, spec: PerturbationSpec, eps_grid,
                         n_wealth: int = 50, seed: int = 0,
                         tol: float = 1e-10) -> DeflatorReport:
    """Certify Z_eps = E(-(lam (1 + eps theta)) . M) as a supermartingale
    deflator of the perturbed market: E_n[Z X] <= Z_n X_n at every node for
    sampled admissible wealth processes, exactly on trees.
    """
    rng = np.random.default_rng(seed)
    tree = market.tree
    theta = tree_control(tree, spec.theta)
    worst = -np.inf
    used_eps = []
    for eps in np.atleast_1d(eps_grid):
        eps = float(eps)
        used_eps.append(eps)
        mkt_eps = perturbed_market(market, spec, eps)
        lam_tilde = market.lam * (1.0 + eps * theta)
        driver = stochastic_integral(lam_tilde, market.m)
        z = stochastic_exponential(TreeProcess(tree, -driver.values),
                                   variant="multiplicative")
        if np.any(z.values < 0):
            raise ValueError("deflator candidate went negative; increments too large")
        for s in range(n_wealth):
            x = _random_admissible_wealth(mkt_eps, rng)
            zx = z.values * x
            for n in range(tree.n_nodes):
                c = tree.children[n]
                if len(c) == 0:
                    continue
                resid = float(np.dot(tree.branch_prob[c], zx[c]) - zx[n])
                worst = max(worst, resid)
    return DeflatorReport(
        name="nupbr-deflator",
        passed=bool(worst <= tol),
        eps_grid=used_eps,
        max_residual=worst,
        details={"n_wealth": n_wealth, "tol": tol},
    )


def _random_admissible_wealth(market: TreeMarket, rng) -> np.ndarray:
    tree = market.tree
    x = np.ones(tree.n_nodes)
    for k in range(tree.n_periods):
        for n in tree.levels[k]:
            c = tree.children[n]
            dr = market.dr0[c]
            if np.all(np.abs(dr) < 1e-15):
                h = 0.0
            else:
                h_lo, h_hi = market.fraction_bounds(n)
                h = h_lo + rng.uniform(0.01, 0.99) * (h_hi - h_lo)
            x[c] = x[n] * (1.0 + h * dr)
    return x


def nupbr_deflator_check_paths(bmarket: BrownianMarket, spec: PerturbationSpec,
                               eps_grid, pi_samples, band_se: float = 3.0) -> DeflatorReport:
    """Ensemble version of the deflator certificate.

    Per-step mean increments of Z_eps X are tested against a ``band_se``
    standard-error band.  With thousands of step inequalities a few band
    crossings are expected under the null, so the check fails only if the
    crossing fraction exceeds 1%, any z-score exceeds twice the band, or
    the aggregated terminal inequality E[Z_T X_T] <= 1 misses its band.
    """
    n = bmarket.ensemble.n_paths
    worst_z = -np.inf
    crossings = 0
    n_tests = 0
    terminal_ok = True
    dm = bmarket.sigma * bmarket.ensemble.increments
    for eps in np.atleast_1d(eps_grid):
        eps = float(eps)
        lam_tilde = bmarket.lam * (1.0 + eps * np.asarray(spec.theta))
        z_factors = 1.0 - lam_tilde * dm
        z_factors = np.where(z_factors > 0, z_factors, 0.0)
        z = np.ones((n, dm.shape[1] + 1))
        np.cumprod(z_factors, axis=1, out=z[:, 1:])
        r_eps = perturbed_return_paths(bmarket, spec, eps)
        for pi in np.atleast_1d(pi_samples):
            x = bmarket.wealth(float(pi), r=r_eps)
            zx = z * x.values
            d = np.diff(zx, axis=1)
            se = d.std(axis=0, ddof=1) / np.sqrt(n)
            zscores = d.mean(axis=0) / np.where(se > 0, se, np.inf)
            worst_z = max(worst_z, float(np.max(zscores)))
            crossings += int(np.sum(zscores > band_se))
            n_tests += zscores.size
            term = zx[:, -1] - 1.0
            t_se = term.std(ddof=1) / np.sqrt(n)
            terminal_ok = terminal_ok and float(term.mean()) <= band_se * t_se
    frac = crossings / max(n_tests, 1)
    passed = frac <= 0.01 and worst_z <= 2.0 * band_se and terminal_ok
    return DeflatorReport(
        name="nupbr-deflator-mc",
        passed=bool(passed),
        eps_grid=list(np.atleast_1d(eps_grid).astype(float)),
        max_residual=worst_z,
        details={"band_se": band_se, "crossing_fraction": frac,
                 "n_tests": n_tests, "terminal_ok": bool(terminal_ok)},
    )


# ---------------------------------------------------------------------------
# Integrability probe
# ---------------------------------------------------------------------------

@dataclass
class IntegrabilityReport:
    name: str
    c_grid: list
    estimates: list
    spreads: list
    largest_stable_c: float
    details: dict


def integrability_probe(model, spec: PerturbationSpec, tilted: TiltedMeasure,
                        c_grid, n_splits: int = 4,
                        spread_tol: float = 0.5) -> IntegrabilityReport:
    """Estimate E-tilde[exp(c (|r_bar_T| + <r_bar>_T))] over a grid of c and
    report the largest c whose estimate is stable under sample splitting.

    On finite trees the expectation is an exact sum and every c on the grid
    is stable; on ensembles the exponential's heavy tail makes the split
    estimates diverge from each other once c is too large for the sample.
    """
    corr = correction_process(model, spec, 0.0)
    if isinstance(model, TreeMarket):
        rb = corr.r_bar.values[model.tree.leaves]
        qb = corr.qv_bar.values[model.tree.leaves]
        weights = tilted.weights
        tree = model.tree
        estimates, spreads = [], []
        for c in c_grid:
            val = tree.condexp_from_leaves(weights * np.exp(c * (np.abs(rb) + qb)))
            estimates.append(float(np.max(val[tree.levels[tilted.t]])))
            spreads.append(0.0)
        largest = float(c_grid[-1])
    else:
        rb = corr.r_bar.terminal
        qb = corr.qv_bar.terminal
        w = tilted.weights
        base = np.abs(rb) + qb
        estimates, spreads = [], []
        largest = -np.inf
        folds = np.array_split(np.arange(base.size), n_splits)
        for c in c_grid:
            x = w * np.exp(c * base)
            est = float(np.mean(x))
            fold_means = np.array([float(np.mean(x[f])) for f in folds])
            spread = float((fold_means.max() - fold_means.min()) / max(est, 1e-300))
            estimates.append(est)
            spreads.append(spread)
            if spread <= spread_tol and np.isfinite(est):
                largest = max(largest, float(c))
    return IntegrabilityReport(
        name="integrability-probe",
        c_grid=list(map(float, c_grid)),
        estimates=estimates,
        spreads=spreads,
        largest_stable_c=largest,
        details={"n_splits": n_splits, "spread_tol": spread_tol},
    )
