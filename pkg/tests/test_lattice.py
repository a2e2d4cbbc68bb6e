"""Tree/ensemble containers and the stochastic-calculus primitives."""

import numpy as np
import pytest

from duality_lab.lattice import (
    PathEnsemble,
    PathProcess,
    TimeGrid,
    TreeProcess,
    base_return,
    counter_normals,
    quadratic_variation,
    stochastic_exponential,
    stochastic_integral,
)
from duality_lab.market import TreeMarket, random_tree_market


def brownian_paths(seed, n_paths, n_steps, sigma=0.2, horizon=1.0):
    grid = TimeGrid.uniform(horizon, n_steps)
    ens = PathEnsemble.generate(seed, n_paths, grid)
    vals = np.zeros((n_paths, n_steps + 1))
    np.cumsum(sigma * ens.increments, axis=1, out=vals[:, 1:])
    return PathProcess(grid, vals)


# ---------------------------------------------------------------------------
# grids and trees
# ---------------------------------------------------------------------------

def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 0.5]))  # must start at 0
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5]))  # strictly increasing
    grid = TimeGrid.uniform(1.0, 4)
    assert grid.n_steps == 4 and grid.horizon == 1.0
    fine = grid.halved()
    assert fine.n_steps == 8
    assert np.allclose(fine.times[::2], grid.times)


def test_tree_validation_rejects_bad_probabilities():
    from duality_lab.lattice import FiltrationTree
    times = TimeGrid.uniform(1.0, 1)
    with pytest.raises(ValueError, match="sum"):
        FiltrationTree(times, np.array([-1, 0, 0]), np.array([1.0, 0.6, 0.6]))
    with pytest.raises(ValueError, match="positive"):
        FiltrationTree(times, np.array([-1, 0, 0]), np.array([1.0, 1.0, 0.0]))
    # a leaf before the final time
    times2 = TimeGrid.uniform(1.0, 2)
    with pytest.raises(ValueError, match="leaf|depth"):
        FiltrationTree(times2, np.array([-1, 0, 0, 1]),
                       np.array([1.0, 0.5, 0.5, 1.0]))


def test_market_rejects_drifting_driver_and_one_sided_returns():
    from duality_lab.lattice import FiltrationTree
    times = TimeGrid.uniform(1.0, 1)
    tree = FiltrationTree(times, np.array([-1, 0, 0]), np.array([1.0, 0.5, 0.5]))
    with pytest.raises(ValueError, match="martingale"):
        TreeMarket(tree, np.array([0.0, 0.1, -0.05]), 0.0)
    # drift large enough to push both branch returns positive
    with pytest.raises(ValueError, match="one-sided"):
        TreeMarket(tree, np.array([0.0, 0.1, -0.1]), 15.0)


# ---------------------------------------------------------------------------
# quadratic variation
# ---------------------------------------------------------------------------

def test_qv_constant_process_is_zero(binomial3):
    const = TreeProcess(binomial3.tree, np.full(binomial3.tree.n_nodes, 3.7))
    for mode in ("predictable", "realized"):
        assert np.all(quadratic_variation(const, mode).values == 0.0)


def test_qv_symmetric_binomial_gains_delta_sq_per_step(binomial3):
    qv = quadratic_variation(binomial3.m, "predictable")
    level = binomial3.tree.level
    assert np.allclose(qv.values, 0.1 ** 2 * level)


def test_qv_modes_coincide_for_deterministic_squared_increments(binomial3):
    # |dM| = delta on both branches, so realized == predictable
    pred = quadratic_variation(binomial3.m, "predictable")
    real = quadratic_variation(binomial3.m, "realized")
    assert np.allclose(pred.values, real.values)


def test_qv_realized_brownian_matches_sigma_sq_T():
    # sample-statistics oracle: realized <M>_T concentrates at sigma^2 T
    m = brownian_paths(seed=11, n_paths=10_000, n_steps=1000)
    qv_T = quadratic_variation(m, "realized").terminal
    se = qv_T.std(ddof=1) / np.sqrt(qv_T.size)
    assert abs(qv_T.mean() - 0.04) <= 3 * se


def test_qv_mode_errors():
    m = brownian_paths(seed=1, n_paths=10, n_steps=8)
    with pytest.raises(ValueError, match="predictable"):
        quadratic_variation(m, "predictable")
    with pytest.raises(ValueError, match="mode"):
        quadratic_variation(m, "weird")


# ---------------------------------------------------------------------------
# stochastic integral
# ---------------------------------------------------------------------------

def test_integral_zero_and_telescoping(binomial3):
    m = binomial3.m
    zero = stochastic_integral(0.0, m)
    assert np.all(zero.values == 0.0)
    one = stochastic_integral(1.0, m)
    assert np.allclose(one.values, m.values - m.values[0])


def test_integral_single_step_product():
    from duality_lab.lattice import FiltrationTree
    times = TimeGrid.uniform(1.0, 1)
    tree = FiltrationTree(times, np.array([-1, 0, 0]), np.array([1.0, 0.5, 0.5]))
    x = TreeProcess(tree, np.array([0.0, 0.05, -0.05]))
    integ = stochastic_integral(2.0, x)
    assert integ.values[1] == pytest.approx(0.10, abs=1e-15)


def test_integral_linearity(binomial3):
    rng = np.random.default_rng(5)
    tree = binomial3.tree
    h1 = rng.normal(size=tree.n_nodes)
    h2 = rng.normal(size=tree.n_nodes)
    x = binomial3.m
    lhs = stochastic_integral(2.5 * h1 + h2, x).values
    rhs = 2.5 * stochastic_integral(h1, x).values + stochastic_integral(h2, x).values
    assert np.allclose(lhs, rhs, atol=1e-14)
    # linearity in the integrator
    y = TreeProcess(tree, rng.normal(size=tree.n_nodes))
    z = TreeProcess(tree, x.values + y.values)
    lhs2 = stochastic_integral(h1, z).values
    rhs2 = stochastic_integral(h1, x).values + stochastic_integral(h1, y).values
    assert np.allclose(lhs2, rhs2, atol=1e-14)


def test_integral_shape_mismatch():
    m = brownian_paths(seed=2, n_paths=4, n_steps=6)
    with pytest.raises(ValueError, match="control"):
        stochastic_integral(np.ones(5), m)


# ---------------------------------------------------------------------------
# stochastic exponential
# ---------------------------------------------------------------------------

def test_exponential_trivial_cases(binomial3):
    tree = binomial3.tree
    const = TreeProcess(tree, np.zeros(tree.n_nodes))
    assert np.all(stochastic_exponential(const).values == 1.0)
    from duality_lab.lattice import FiltrationTree
    times = TimeGrid.uniform(1.0, 1)
    t1 = FiltrationTree(times, np.array([-1, 0, 0]), np.array([1.0, 0.5, 0.5]))
    x = TreeProcess(t1, np.array([0.0, 0.1, -0.02]))
    assert stochastic_exponential(x).values[1] == pytest.approx(1.1, abs=1e-15)


def test_exponential_absorbs_at_zero():
    grid = TimeGrid.uniform(1.0, 3)
    vals = np.array([[0.0, -1.5, -1.0, -0.5]])  # first step factor <= 0
    se = stochastic_exponential(PathProcess(grid, vals))
    assert np.all(se.values[0, 1:] == 0.0)


def test_multiplicative_exponential_is_self_financing_wealth(binomial3):
    pi = 0.4
    scaled = stochastic_integral(pi, binomial3.r0)
    wealth_se = stochastic_exponential(scaled, "multiplicative")
    wealth = binomial3.wealth(pi, x0=1.0)
    assert np.array_equal(wealth_se.values, wealth.values)


def test_multiplicative_exponential_convergence_orders():
    """Grid-halving rates of the multiplicative exponential of sigma W on
    shared Gaussian draws.

    Against the exact log-normal exp(sigma W_T - sigma^2 T / 2) the gap is
    dominated by the realized-variance fluctuation and decays at order
    sqrt(dt) (halving ratio ~ 0.71); against the exponential-variant
    discretization (realized bracket, same draws) the shared fluctuation
    cancels and the gap decays at order dt (ratio ~ 0.5)."""
    sigma = 0.2
    errs_exact, errs_disc = [], []
    for n_steps in (64, 128, 256, 512):
        grid = TimeGrid.uniform(1.0, 512)
        ens = PathEnsemble.generate(33, 4000, grid).coarsened(512 // n_steps)
        w = np.zeros((4000, n_steps + 1))
        np.cumsum(ens.increments, axis=1, out=w[:, 1:])
        m = PathProcess(ens.times, sigma * w)
        mult = stochastic_exponential(m, "multiplicative").terminal
        exact = np.exp(sigma * w[:, -1] - 0.5 * sigma ** 2)
        disc = stochastic_exponential(m, "exponential").terminal
        errs_exact.append(np.mean(np.abs(mult - exact)))
        errs_disc.append(np.mean(np.abs(mult - disc)))
    r_exact = [errs_exact[i + 1] / errs_exact[i] for i in range(3)]
    r_disc = [errs_disc[i + 1] / errs_disc[i] for i in range(3)]
    assert all(0.62 <= r <= 0.80 for r in r_exact)  # sqrt(dt)
    assert all(0.35 <= r <= 0.65 for r in r_disc)   # dt


def test_exponential_variant_unknown():
    m = brownian_paths(seed=3, n_paths=3, n_steps=4)
    with pytest.raises(ValueError, match="variant"):
        stochastic_exponential(m, "geometric")


# ---------------------------------------------------------------------------
# base return
# ---------------------------------------------------------------------------

def test_base_return_trivial(binomial3):
    r = base_return(binomial3.m, 0.0)
    assert np.allclose(r.values, binomial3.m.values)
    zero = TreeProcess(binomial3.tree, np.zeros(binomial3.tree.n_nodes))
    assert np.all(base_return(zero, 1.3).values == 0.0)


def test_base_return_drift_sample_mean():
    # drift per unit time lam sigma^2 = 0.07, confirmed over 10^4 paths
    sigma, lam = 0.2, 1.75
    m = brownian_paths(seed=17, n_paths=10_000, n_steps=500, sigma=sigma)
    r = base_return(m, lam)
    terminal = r.terminal
    se = terminal.std(ddof=1) / np.sqrt(terminal.size)
    assert abs(terminal.mean() - lam * sigma ** 2) <= 3 * se


def test_tree_martingale_property_of_random_markets():
    for seed in range(12):
        market = random_tree_market(seed=seed + 600)
        tree = market.tree
        for n in range(tree.n_nodes):
            c = tree.children[n]
            if len(c):
                drift = float(np.dot(tree.branch_prob[c], market.dm[c]))
                assert abs(drift) <= 1e-12


# ---------------------------------------------------------------------------
# ensembles and reproducibility
# ---------------------------------------------------------------------------

def test_ensemble_seed_reproducibility():
    grid = TimeGrid.uniform(1.0, 32)
    a = PathEnsemble.generate(123, 5000, grid)
    b = PathEnsemble.generate(123, 5000, grid)
    assert np.array_equal(a.increments, b.increments)
    c = PathEnsemble.generate(124, 5000, grid)
    assert not np.array_equal(a.increments, c.increments)


def test_ensemble_moments():
    grid = TimeGrid.uniform(1.0, 16)
    ens = PathEnsemble.generate(9, 60_000, grid)
    dt = grid.dt[0]
    mean = ens.increments.mean(axis=0)
    var = ens.increments.var(axis=0)
    assert np.all(np.abs(mean) <= 4 * np.sqrt(dt / 60_000))
    assert np.allclose(var, dt, rtol=0.05)


def test_ensemble_substream_layout():
    grid = TimeGrid.uniform(1.0, 4)
    ens = PathEnsemble.generate(3, 5000, grid)
    assert ens.substream[0] == 0 and ens.substream[-1] == 5000 // 4096


def test_counter_normals_prefix_stability():
    a = counter_normals(7, 100, 20, stream=3)
    b = counter_normals(7, 60, 20, stream=3)
    assert np.array_equal(a[:60], b)


def test_coarsened_shares_brownian_path():
    grid = TimeGrid.uniform(1.0, 64)
    ens = PathEnsemble.generate(21, 100, grid)
    coarse = ens.coarsened(4)
    assert np.allclose(coarse.increments.sum(axis=1), ens.increments.sum(axis=1))
    with pytest.raises(ValueError, match="divide"):
        ens.coarsened(7)
