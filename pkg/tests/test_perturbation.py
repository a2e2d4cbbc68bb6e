"""Perturbed returns, correction process, decomposition, tilt, probes."""

import numpy as np
import pytest

from duality_lab.duality import solve_pair
from duality_lab.lattice import PathEnsemble, TimeGrid, stochastic_integral
from duality_lab.market import BrownianMarket
from duality_lab.perturbation import (
    PerturbationSpec,
    TiltedMeasure,
    correction_process,
    integrability_probe,
    matched_nu,
    nupbr_deflator_check,
    nupbr_deflator_check_paths,
    perturbed_market,
    perturbed_return_paths,
    tilted_measure_tree,
    wealth_decomposition_check,
)
from duality_lab.utility import Crra
from oracles import abs_gaussian_exp_moment, risk_neutral_ratios

SPEC = PerturbationSpec(psi=0.1, theta=0.5)


def small_bs(seed=42, n_paths=200, n_steps=64, sigma=0.2, lam=1.75):
    grid = TimeGrid.uniform(1.0, n_steps)
    return BrownianMarket(sigma=sigma, lam=lam,
                          ensemble=PathEnsemble.generate(seed, n_paths, grid))


# ---------------------------------------------------------------------------
# perturbed returns
# ---------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError, match="variant"):
        PerturbationSpec(psi=0.1, theta=0.5, variant="odd")
    with pytest.raises(ValueError, match="nu"):
        PerturbationSpec(psi=0.1, theta=0.5, variant="additive")
    with pytest.raises(ValueError, match="bound"):
        PerturbationSpec(psi=np.array([0.1, 5.0]), theta=0.0, psi_max=1.0)
    spec = PerturbationSpec(psi=10.0, theta=0.0)
    assert spec.eps_neighborhood() == pytest.approx(0.05)  # 1 / (2 psi_max)
    assert PerturbationSpec(psi=0.1, theta=0.0).eps_neighborhood() == 0.1
    with pytest.raises(ValueError, match="nonpositive"):
        spec.check_eps(-0.2)


def test_eps_zero_identity_tree(trinomial2):
    m0 = perturbed_market(trinomial2, SPEC, 0.0)
    assert np.array_equal(m0.dr0, trinomial2.dr0)
    assert np.array_equal(m0.dm, trinomial2.dm)


def test_eps_zero_identity_paths():
    bm = small_bs()
    r0 = bm.return_process()
    r_eps = perturbed_return_paths(bm, SPEC, 0.0)
    assert np.array_equal(r_eps.values, r0.values)


def test_variants_coincide_under_reparametrized_nu(trinomial2):
    eps = 0.07
    nu = matched_nu(trinomial2.lam[0], 0.1, 0.5, eps)
    add = PerturbationSpec(psi=0.1, theta=0.5, variant="additive", nu=nu)
    m_mult = perturbed_market(trinomial2, SPEC, eps)
    m_add = perturbed_market(trinomial2, add, eps)
    assert np.allclose(m_mult.dr0, m_add.dr0, atol=1e-15)
    # on paths as well
    bm = small_bs(n_paths=50)
    r_mult = perturbed_return_paths(bm, SPEC, eps)
    nu_bs = matched_nu(bm.lam, 0.1, 0.5, eps)
    r_add = perturbed_return_paths(
        bm, PerturbationSpec(psi=0.1, theta=0.5, variant="additive", nu=nu_bs), eps)
    assert np.allclose(r_mult.values, r_add.values, atol=1e-12)


def test_psi_zero_variants_coincide(trinomial2):
    eps = 0.05
    mult = PerturbationSpec(psi=0.0, theta=0.5)
    add = PerturbationSpec(psi=0.0, theta=0.5, variant="additive",
                           nu=matched_nu(trinomial2.lam[0], 0.0, 0.5, eps))
    assert np.allclose(perturbed_market(trinomial2, mult, eps).dr0,
                       perturbed_market(trinomial2, add, eps).dr0, atol=1e-15)


def test_multiplicative_scaling_of_parts():
    # psi = 0.1, theta = 0: both parts scale by (1 + eps psi)
    bm = small_bs(n_paths=20)
    spec = PerturbationSpec(psi=0.1, theta=0.0)
    eps = 0.05
    r0 = bm.return_process()
    r_eps = perturbed_return_paths(bm, spec, eps)
    assert np.allclose(r_eps.values, (1 + eps * 0.1) * r0.values, rtol=1e-13)


def test_additive_variant_affine_in_eps():
    bm = small_bs(n_paths=30)
    spec = PerturbationSpec(psi=0.1, theta=0.0, variant="additive", nu=0.4)
    r0 = perturbed_return_paths(bm, spec, 0.0).values
    r1 = perturbed_return_paths(bm, spec, 0.04).values
    r2 = perturbed_return_paths(bm, spec, 0.08).values
    assert np.max(np.abs(r2 - 2 * r1 + r0)) <= 1e-13


def test_eps_direction_at_zero_matches_central_difference(trinomial2):
    # dR_eps/deps at 0 = psi . M + lam (psi + theta) . <M>, exactly for
    # central differences (R_eps is quadratic in eps)
    psi, theta = 0.1, 0.5
    e = 1e-3
    up = perturbed_market(trinomial2, SPEC, e)
    dn = perturbed_market(trinomial2, SPEC, -e)
    fd = (up.r0.values - dn.r0.values) / (2 * e)
    lam = trinomial2.lam
    direction = psi * trinomial2.m.values \
        + stochastic_integral(lam * (psi + theta), trinomial2.qv).values
    assert np.allclose(fd, direction, atol=1e-11)


def test_psi_bound_violation_rejected(trinomial2):
    spec = PerturbationSpec(psi=4.0, theta=0.0)
    with pytest.raises(ValueError, match="nonpositive"):
        perturbed_market(trinomial2, spec, -0.3)


# ---------------------------------------------------------------------------
# correction process
# ---------------------------------------------------------------------------

def test_correction_trivial_identities(trinomial2):
    corr = correction_process(trinomial2, SPEC, 0.0)
    assert np.all(corr.l_process.values == 1.0)
    theta0 = PerturbationSpec(psi=0.1, theta=0.0)
    for eps in (0.0, 0.05, -0.05):
        corr0 = correction_process(trinomial2, theta0, eps)
        assert np.all(corr0.l_process.values == 1.0)
    bm = small_bs(n_paths=10)
    assert np.all(correction_process(bm, SPEC, 0.0).l_process.values == 1.0)


def test_correction_closed_form_constant_coefficients():
    # L_T = exp(-eps c R0_T - eps^2 c^2 <R0>_T / 2) with c = lam theta
    bm = small_bs(n_paths=40)
    eps = 0.05
    corr = correction_process(bm, SPEC, eps)
    c = bm.lam * 0.5
    r0 = bm.return_process()
    from duality_lab.lattice import quadratic_variation
    qv = quadratic_variation(r0, "realized")
    expected = np.exp(-eps * c * r0.terminal - 0.5 * eps ** 2 * c ** 2 * qv.terminal)
    assert np.allclose(corr.l_process.terminal, expected, rtol=1e-12)


def test_correction_derivative_identities_pathwise():
    bm = small_bs(n_paths=60)
    for eps in (0.0, 0.03, -0.04):
        corr = correction_process(bm, SPEC, eps)
        de = 1e-5
        up = correction_process(bm, SPEC, eps + de).l_process.terminal
        dn = correction_process(bm, SPEC, eps - de).l_process.terminal
        fd = (up - dn) / (2 * de)
        assert np.max(np.abs(fd - corr.l_derivative_terminal())) <= 1e-10
        up_i = 1.0 / up
        dn_i = 1.0 / dn
        fd_i = (up_i - dn_i) / (2 * de)
        assert np.max(np.abs(fd_i - corr.inv_l_derivative_terminal())) <= 1e-10
    corr0 = correction_process(bm, SPEC, 0.0)
    assert np.array_equal(corr0.l_derivative_terminal(), corr0.terminal_f)
    assert np.array_equal(corr0.inv_l_derivative_terminal(), -corr0.terminal_f)


def test_correction_additive_variant_same_limit_slope():
    # remPert-style check: with matched nu, the additive-variant correction
    # has the same derivative at eps = 0 (namely F = -r_bar_T)
    bm = small_bs(n_paths=40)
    lam = bm.lam
    de = 1e-6
    corr0 = correction_process(bm, SPEC, 0.0)
    l_t = []
    for eps in (de, -de):
        eta_eps = lam - (lam + eps * matched_nu(lam, 0.1, 0.5, eps)) / (1 + eps * 0.1)
        r0 = bm.return_process()
        core = stochastic_integral(eta_eps, r0)
        from duality_lab.lattice import quadratic_variation
        qv = quadratic_variation(core, "realized")
        l_t.append(np.exp(core.terminal - 0.5 * qv.terminal))
    fd = (l_t[0] - l_t[1]) / (2 * de)
    assert np.max(np.abs(fd - corr0.terminal_f)) <= 1e-6


def test_correction_tree_multiplicative_variant(trinomial2):
    corr = correction_process(trinomial2, SPEC, 0.05)
    assert corr.variant == "multiplicative"
    with pytest.raises(ValueError, match="exponential"):
        corr.l_derivative_terminal()
    # multiplicative L is itself a unit-capital wealth process in the base
    # market: nonnegative, starts at 1
    assert corr.l_process.values[0] == 1.0
    assert np.all(corr.l_process.values >= 0.0)


# ---------------------------------------------------------------------------
# wealth decomposition
# ---------------------------------------------------------------------------

def test_decomposition_eps_zero_exact():
    bm = small_bs(n_paths=50, n_steps=256)
    rep = wealth_decomposition_check(bm, SPEC, pi=0.3, x0=1.0, eps=0.0, n_levels=3)
    assert rep.passed
    assert all(e == 0.0 for e in rep.mean_errors)


def test_decomposition_first_order_convergence():
    grid = TimeGrid.uniform(1.0, 1024)
    bm = BrownianMarket(sigma=0.2, lam=1.75,
                        ensemble=PathEnsemble.generate(7, 100, grid))
    rep = wealth_decomposition_check(bm, SPEC, pi=0.3, x0=1.0, eps=0.05)
    assert rep.passed
    assert all(0.35 <= r <= 0.65 for r in rep.ratios)


def test_decomposition_rejects_inadmissible_strategy():
    bm = small_bs(n_paths=50, n_steps=16, sigma=0.9)
    with pytest.raises(ValueError, match="admissible"):
        wealth_decomposition_check(bm, SPEC, pi=12.0, x0=1.0, eps=0.05)


def test_decomposition_single_step_cross_term():
    """One-step algebra: with multiplicative exponentials on a single step,
    X_eps - X0 E(eps(psi pi - lam theta) . M^R) / L_eps misses exactly the
    discrete cross terms of the product expansion, computed explicitly."""
    grid = TimeGrid.uniform(1.0, 1)
    ens = PathEnsemble.generate(3, 8, grid)
    bm = BrownianMarket(sigma=0.2, lam=1.0, ensemble=ens)
    psi, theta, pi, eps = 0.1, 0.5, 0.3, 0.05
    dm = (bm.sigma * ens.increments)[:, 0]
    dq = dm ** 2
    dr0 = dm + bm.lam * dq
    dr_eps = (1 + eps * psi) * (dm + bm.lam * (1 + eps * theta) * dq)
    x_eps = 1.0 + pi * dr_eps
    dmr = dr0 - pi * dq
    a = eps * (psi * pi - bm.lam * theta) * dmr
    b = -eps * bm.lam * theta * dr0
    # multiplicative one-step reconstruction and its exact residual
    recon = (1.0 + pi * dr0) * (1.0 + a) / (1.0 + b)
    lhs = x_eps - recon
    expected = x_eps - (1.0 + pi * dr0) * (1.0 + a - b + b * b / (1.0 + b)
                                           - a * b / (1.0 + b))
    assert np.allclose(lhs, expected, atol=1e-14)


# ---------------------------------------------------------------------------
# tilted measure
# ---------------------------------------------------------------------------

def test_tilted_measure_binomial_closed_form(binomial3):
    field = Crra(2.0)
    sol = solve_pair(binomial3, field, 1.0, t=0)
    tilt = tilted_measure_tree(sol)
    # oracle: density z_T^(1 - 1/gamma) normalized, from the risk-neutral
    # ratios of the complete market (martingale-method change of measure)
    zeta = risk_neutral_ratios(binomial3)
    dens = np.ones(binomial3.tree.n_nodes)
    for i in range(1, binomial3.tree.n_nodes):
        dens[i] = dens[binomial3.tree.parent[i]] * zeta[i]
    leaves = binomial3.tree.leaves
    beta = 1.0 - 1.0 / field.gamma
    raw = dens[leaves] ** beta
    raw /= np.dot(binomial3.tree.node_prob[leaves], raw)
    assert np.allclose(tilt.weights, raw, rtol=1e-9)


def test_tilted_measure_terminal_time(trinomial2):
    n = trinomial2.tree.n_periods
    sol = solve_pair(trinomial2, Crra(2.0), 1.0, t=n)
    tilt = tilted_measure_tree(sol)
    assert np.allclose(tilt.weights, 1.0, atol=1e-12)


def test_tilted_measure_conditional_expectations_by_leaf_sums(trinomial2):
    sol = solve_pair(trinomial2, Crra(2.0), 1.0, t=1)
    tilt = tilted_measure_tree(sol)
    tree = trinomial2.tree
    rng = np.random.default_rng(4)
    f = rng.normal(size=tree.leaves.size)
    expect = tilt.expect(f)
    # brute-force conditional sums per time-1 node
    w = tilt.weights
    for j, node in enumerate(tree.levels[1]):
        leaves = tree.subtree_leaves(int(node))
        slots = [int(np.searchsorted(tree.leaves, l)) for l in leaves]
        cp = np.array([tree.node_prob[l] / tree.node_prob[node] for l in leaves])
        direct = float(np.dot(cp, w[slots] * f[slots]))
        assert expect[j] == pytest.approx(direct, abs=1e-12)


def test_tilted_measure_rejects_bad_density(trinomial2):
    with pytest.raises(ValueError, match="mass"):
        TiltedMeasure(np.full(trinomial2.tree.leaves.size, 1.3),
                      tree=trinomial2.tree, t=0)


def test_tilted_density_martingale_after_t(trinomial2):
    sol = solve_pair(trinomial2, Crra(2.0), 1.0, t=1)
    tilt = tilted_measure_tree(sol)
    dens = tilt.density_process_tree().values
    tree = trinomial2.tree
    assert np.all(dens[tree.levels[0]] == 1.0)
    for k in range(1, tree.n_periods):
        for n in tree.levels[k]:
            c = tree.children[n]
            assert np.dot(tree.branch_prob[c], dens[c]) == pytest.approx(
                dens[n], abs=1e-12)


# ---------------------------------------------------------------------------
# deflator certificates
# ---------------------------------------------------------------------------

def test_nupbr_deflator_exact_on_trees(binomial3, trinomial2):
    for market in (binomial3, trinomial2):
        rep = nupbr_deflator_check(market, SPEC, [0.0, 0.05, -0.05],
                                   n_wealth=50, seed=0)
        assert rep.passed
        assert rep.max_residual <= 1e-10


def test_nupbr_binomial_zero_eps_is_martingale(binomial3):
    # at eps = 0 the candidate is the exact martingale density: equality
    rep = nupbr_deflator_check(binomial3, SPEC, [0.0], n_wealth=10, seed=1)
    assert rep.passed
    assert abs(rep.max_residual) <= 1e-12


def test_nupbr_deterministic_driver_edge():
    # a branchless second period: dR = 0 there, Z constant, trivially fine
    from duality_lab.lattice import FiltrationTree
    from duality_lab.market import TreeMarket
    times = TimeGrid.uniform(1.0, 2)
    parent = np.array([-1, 0, 0, 1, 2])
    prob = np.array([1.0, 0.5, 0.5, 1.0, 1.0])
    dm = np.array([0.0, 0.1, -0.1, 0.0, 0.0])
    market = TreeMarket(FiltrationTree(times, parent, prob), dm, 0.5)
    rep = nupbr_deflator_check(market, SPEC, [0.0, 0.05], n_wealth=10, seed=2)
    assert rep.passed


def test_nupbr_paths_band():
    bm = small_bs(n_paths=4000, n_steps=64)
    rep = nupbr_deflator_check_paths(bm, SPEC, [0.0, 0.05, -0.05],
                                     pi_samples=[0.0, 0.3, 1.0])
    assert rep.passed
    assert rep.details["crossing_fraction"] <= 0.01


# ---------------------------------------------------------------------------
# integrability probe
# ---------------------------------------------------------------------------

def test_probe_theta_zero_trivial(trinomial2):
    spec0 = PerturbationSpec(psi=0.1, theta=0.0)
    sol = solve_pair(trinomial2, Crra(2.0), 1.0, t=0)
    tilt = tilted_measure_tree(sol)
    rep = integrability_probe(trinomial2, spec0, tilt, [0.5, 1.0, 10.0])
    assert all(e == pytest.approx(1.0, abs=1e-12) for e in rep.estimates)


def test_probe_finite_tree_stable_everywhere(trinomial2):
    sol = solve_pair(trinomial2, Crra(2.0), 1.0, t=0)
    tilt = tilted_measure_tree(sol)
    rep = integrability_probe(trinomial2, SPEC, tilt, [0.5, 2.0, 8.0, 32.0])
    assert rep.largest_stable_c == 32.0
    assert all(np.isfinite(rep.estimates))


def test_probe_gaussian_matches_moment_oracle_and_detects_instability():
    bm = small_bs(seed=11, n_paths=4000, n_steps=128)
    cf_gamma = 2.0
    theta_m = bm.lam * bm.sigma
    shift = -(1 - 1 / cf_gamma) * theta_m
    w_T = bm.driver().terminal / bm.sigma
    weights = np.exp(shift * w_T - 0.5 * shift ** 2)
    tilt = TiltedMeasure(weights / weights.mean(), tree=None, t=0)
    c_grid = [0.25, 0.5, 40.0, 120.0]
    rep = integrability_probe(bm, SPEC, tilt, c_grid)
    # oracle: under the tilt, r_bar_T ~ lam theta (sigma W_T + lam sigma^2)
    # with W_T ~ N(shift, 1); <r_bar>_T concentrates at its deterministic
    # limit, entering the exponent as a near-constant factor
    lt = bm.lam * 0.5
    mean = lt * (bm.sigma * shift + bm.lam * bm.sigma ** 2)
    sd = lt * bm.sigma
    for c, est in zip(c_grid[:2], rep.estimates[:2]):
        qv_term = lt ** 2 * bm.sigma ** 2  # deterministic limit of <r_bar>_T
        oracle = abs_gaussian_exp_moment(c, mean, sd) * np.exp(c * qv_term)
        assert est == pytest.approx(oracle, rel=0.05)
    # the extreme entries must be flagged unstable for this sample size
    assert rep.largest_stable_c < 120.0


def test_probe_mc_estimates_match_small_c(trinomial2):
    # tree estimates are exact sums; compare against a direct computation
    sol = solve_pair(trinomial2, Crra(2.0), 1.0, t=0)
    tilt = tilted_measure_tree(sol)
    corr = correction_process(trinomial2, SPEC, 0.0)
    rb = corr.r_bar.values[trinomial2.tree.leaves]
    qb = corr.qv_bar.values[trinomial2.tree.leaves]
    direct = trinomial2.tree.condexp_from_leaves(
        tilt.weights * np.exp(1.0 * (np.abs(rb) + qb)))[0]
    rep = integrability_probe(trinomial2, SPEC, tilt, [1.0])
    assert rep.estimates[0] == pytest.approx(direct, rel=1e-12)
