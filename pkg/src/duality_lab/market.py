"""Market models on top of the lattice containers.

A market is a martingale driver M together with a market price of risk
lambda; the base return is R0 = M + lambda . <M>.  Tree markets validate the
martingale property exactly and reject one-sided returns (which would admit
one-step arbitrage).  Brownian markets discretize dR0 = sigma dW + lambda
sigma^2 dt on a path ensemble.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .lattice import (
    FiltrationTree,
    PathEnsemble,
    PathProcess,
    TimeGrid,
    TreeProcess,
    base_return,
    quadratic_variation,
    tree_control,
)

MARTINGALE_TOL = 1e-12


class TreeMarket:
    """Single risky asset on a filtration tree.

    ``dm[i]`` is the increment of M on the branch into node i (0 at the
    root); ``lam[i]`` is the market price of risk applied on the step out of
    node i.  The conditional mean of dM must vanish at every node, and at
    every node the base return must either vanish on all branches or take
    both signs (otherwise unbounded one-step profits exist).
    """

    def __init__(self, tree: FiltrationTree, dm: np.ndarray, lam,
                 utility_weights: np.ndarray | None = None):
        self.tree = tree
        self.dm = np.asarray(dm, dtype=float)
        if self.dm.shape != (tree.n_nodes,):
            raise ValueError("dm must hold one increment per node")
        if self.dm[0] != 0.0:
            raise ValueError("the root carries no increment")
        self.lam = tree_control(tree, lam)
        self.utility_weights = None
        if utility_weights is not None:
            w = np.asarray(utility_weights, dtype=float)
            if w.shape != (tree.leaves.size,):
                raise ValueError("utility weights must give one value per leaf")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("utility weights must be strictly positive and bounded")
            self.utility_weights = w
        self._build()

    def _build(self) -> None:
        tree = self.tree
        self.dp_cache: dict = {}
        self.m = TreeProcess(tree, self._cum(self.dm))
        drift_err = 0.0
        for i in range(tree.n_nodes):
            c = tree.children[i]
            if len(c):
                drift_err = max(drift_err, abs(float(np.dot(tree.branch_prob[c], self.dm[c]))))
        if drift_err > MARTINGALE_TOL:
            raise ValueError(f"driver is not a martingale: |E[dM|node]| up to {drift_err:.3e}")
        self.qv = quadratic_variation(self.m, mode="predictable")
        self.r0 = base_return(self.m, self.lam)
        self.dr0 = self.r0.increments()
        for i in range(tree.n_nodes):
            c = tree.children[i]
            if len(c) == 0:
                continue
            d = self.dr0[c]
            if np.all(np.abs(d) < 1e-15):
                continue
            if d.min() >= 0.0 or d.max() <= 0.0:
                raise ValueError(
                    f"one-sided return at node {i}: one-step arbitrage"
                )

    def _cum(self, d: np.ndarray) -> np.ndarray:
        out = np.zeros(self.tree.n_nodes)
        for i in range(1, self.tree.n_nodes):
            out[i] = out[self.tree.parent[i]] + d[i]
        return out

    # -- admissible one-step fractions ------------------------------------

    def fraction_bounds(self, node: int, dr=None) -> tuple[float, float]:
        """Closed interval of fractions keeping 1 + h dR0 >= 0 on every
        branch out of ``node``; (-inf, inf) on a branchless (dR0 = 0) step."""
        d = (self.dr0 if dr is None else dr)[self.tree.children[node]]
        lo, hi = -np.inf, np.inf
        pos = d[d > 1e-15]
        neg = d[d < -1e-15]
        if pos.size:
            lo = (-1.0 / pos).max()
        if neg.size:
            hi = (-1.0 / neg).min()
        return float(lo), float(hi)

    def wealth(self, pi, x0: float = 1.0, dr=None) -> TreeProcess:
        """Self-financing wealth from constant-proportion trading:
        X_{k+1} = X_k (1 + pi_k dR_k), exactly the multiplicative stochastic
        exponential of pi . R.  Raises if wealth goes negative on a branch."""
        h = tree_control(self.tree, pi)
        d = self.dr0 if dr is None else d_asarray(dr, self.tree)
        vals = np.empty(self.tree.n_nodes)
        vals[0] = x0
        for i in range(1, self.tree.n_nodes):
            p = self.tree.parent[i]
            vals[i] = vals[p] * (1.0 + h[p] * d[i])
            if vals[i] < 0.0:
                raise ValueError(
                    f"control drives wealth below 0 on the branch into node {i}"
                )
        return TreeProcess(self.tree, vals)


def d_asarray(d, tree: FiltrationTree) -> np.ndarray:
    arr = np.asarray(d, dtype=float)
    if arr.shape != (tree.n_nodes,):
        raise ValueError("per-branch increments must give one value per node")
    return arr


# ---------------------------------------------------------------------------
# Tree construction
# ---------------------------------------------------------------------------

def _grow(times: TimeGrid, branch_moves: list[tuple[np.ndarray, np.ndarray]]):
    """Expand per-period (probabilities, dM) templates into a full tree."""
    parent = [-1]
    prob = [1.0]
    dm = [0.0]
    frontier = [0]
    for probs, moves in branch_moves:
        new_frontier = []
        for node in frontier:
            for p, m in zip(probs, moves):
                parent.append(node)
                prob.append(float(p))
                dm.append(float(m))
                new_frontier.append(len(parent) - 1)
        frontier = new_frontier
    tree = FiltrationTree(times, np.array(parent), np.array(prob))
    return tree, np.array(dm)


def binomial_market(n_periods: int, delta: float, lam: float,
                    horizon: float = 1.0, p_up: float = 0.5,
                    utility_weights=None) -> TreeMarket:
    """Complete binomial market: dM = +delta (prob p_up) / demeaned down."""
    if not (0 < p_up < 1):
        raise ValueError("p_up must lie in (0, 1)")
    # conditional mean zero: p*up + (1-p)*down = 0
    down = -p_up * delta / (1.0 - p_up)
    times = TimeGrid.uniform(horizon, n_periods)
    moves = (np.array([p_up, 1.0 - p_up]), np.array([delta, down]))
    tree, dm = _grow(times, [moves] * n_periods)
    return TreeMarket(tree, dm, lam, utility_weights=utility_weights)


def trinomial_market(n_periods: int, delta: float, lam: float,
                     horizon: float = 1.0, q: float = 0.25,
                     utility_weights=None) -> TreeMarket:
    """Incomplete symmetric trinomial market: dM in {-delta, 0, +delta} with
    probabilities (q, 1 - 2q, q)."""
    if not (0 < q < 0.5):
        raise ValueError("q must lie in (0, 0.5)")
    times = TimeGrid.uniform(horizon, n_periods)
    moves = (np.array([q, 1.0 - 2.0 * q, q]), np.array([delta, 0.0, -delta]))
    tree, dm = _grow(times, [moves] * n_periods)
    return TreeMarket(tree, dm, lam, utility_weights=utility_weights)


def random_tree_market(seed: int, max_periods: int = 3, max_branching: int = 3,
                       weighted: bool = False) -> TreeMarket:
    """Randomized small market for property sweeps.

    Branching and probabilities vary node by node; dM is demeaned at every
    node so the martingale property holds exactly; lambda is shrunk until no
    node has a one-sided return.
    """
    rng = np.random.default_rng(seed)
    n_periods = int(rng.integers(1, max_periods + 1))
    times = TimeGrid.uniform(float(rng.uniform(0.5, 1.5)), n_periods)

    parent = [-1]
    prob = [1.0]
    dm = [0.0]
    frontier = [0]
    for _ in range(n_periods):
        new_frontier = []
        for node in frontier:
            nb = int(rng.integers(2, max_branching + 1))
            p = rng.dirichlet(np.ones(nb)) * 0.8 + 0.2 / nb  # bounded away from 0
            p = p / p.sum()
            scale = rng.uniform(0.02, 0.25)
            raw = rng.normal(0.0, scale, size=nb)
            raw = raw - np.dot(p, raw)  # exact conditional mean zero
            if np.max(np.abs(raw)) < 1e-12:
                raw[:] = 0.0
            for j in range(nb):
                parent.append(node)
                prob.append(float(p[j]))
                dm.append(float(raw[j]))
                new_frontier.append(len(parent) - 1)
        frontier = new_frontier
    tree = FiltrationTree(times, np.array(parent), np.array(prob))
    dm = np.array(dm)
    lam = rng.uniform(-1.5, 1.5)
    weights = None
    if weighted:
        weights = rng.uniform(0.5, 2.0, size=tree.leaves.size)
    for _ in range(40):
        try:
            return TreeMarket(tree, dm, lam, utility_weights=weights)
        except ValueError:
            lam *= 0.5  # shrink the drift until returns are two-sided
    raise RuntimeError("could not build an arbitrage-free random market")


# ---------------------------------------------------------------------------
# Tree market file format (JSON)
# ---------------------------------------------------------------------------
#
# {
#   "times": [0.0, 0.5, 1.0],
#   "nodes": [
#     {"id": 0, "parent": null, "prob": 1.0, "dm": 0.0, "lam": 0.6},
#     {"id": 1, "parent": 0,    "prob": 0.5, "dm": 0.1, "lam": 0.6},
#     ...
#   ],
#   "utility_weights": {"<leaf id>": 1.25, ...}      # optional
# }
#
# Nodes must be listed in topological order (id 0 the root, parents before
# children).  "lam" is required on non-leaf nodes and ignored on leaves.

def tree_market_to_dict(market: TreeMarket) -> dict:
    tree = market.tree
    nodes = []
    for i in range(tree.n_nodes):
        nodes.append({
            "id": i,
            "parent": None if i == 0 else int(tree.parent[i]),
            "prob": float(tree.branch_prob[i]),
            "dm": float(market.dm[i]),
            "lam": float(market.lam[i]),
        })
    out = {"times": [float(t) for t in tree.times.times], "nodes": nodes}
    if market.utility_weights is not None:
        out["utility_weights"] = {
            str(int(l)): float(w) for l, w in zip(tree.leaves, market.utility_weights)
        }
    return out


def tree_market_from_dict(data: dict) -> TreeMarket:
    try:
        times = TimeGrid(np.asarray(data["times"], dtype=float))
        nodes = data["nodes"]
    except KeyError as exc:
        raise ValueError(f"tree file is missing key {exc}") from None
    n = len(nodes)
    parent = np.empty(n, dtype=np.int64)
    prob = np.empty(n)
    dm = np.empty(n)
    lam = np.zeros(n)
    for row in nodes:
        i = int(row["id"])
        if not 0 <= i < n:
            raise ValueError(f"node id {i} out of range")
        parent[i] = -1 if row.get("parent") is None else int(row["parent"])
        prob[i] = float(row.get("prob", 1.0))
        dm[i] = float(row.get("dm", 0.0))
        lam[i] = float(row.get("lam", 0.0))
    tree = FiltrationTree(times, parent, prob)
    weights = None
    if "utility_weights" in data:
        wmap = {int(k): float(v) for k, v in data["utility_weights"].items()}
        missing = [int(l) for l in tree.leaves if int(l) not in wmap]
        if missing:
            raise ValueError(f"utility_weights missing leaves {missing}")
        weights = np.array([wmap[int(l)] for l in tree.leaves])
    return TreeMarket(tree, dm, lam, utility_weights=weights)


def load_tree_market(path: str) -> TreeMarket:
    with open(path, "r", encoding="utf-8") as fh:
        return tree_market_from_dict(json.load(fh))


def save_tree_market(market: TreeMarket, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree_market_to_dict(market), fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Discretized Brownian market
# ---------------------------------------------------------------------------

@dataclass
class BrownianMarket:
    """Constant-coefficient market dR0 = sigma dW + lam sigma^2 dt on an
    ensemble.  The simulated return uses the realized bracket (see module
    notes in ``lattice``); closed-form quantities use sigma^2 t."""

    sigma: float
    lam: float
    ensemble: PathEnsemble

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def times(self) -> TimeGrid:
        return self.ensemble.times

    def driver(self) -> PathProcess:
        from .lattice import _from_increments_paths
        return PathProcess(self.times, _from_increments_paths(
            self.sigma * self.ensemble.increments))

    def return_process(self) -> PathProcess:
        """R0 accumulated directly from the stored increments (martingale
        and drift parts summed separately), so perturbed returns at eps = 0
        can reproduce it bit for bit.  Agrees with the generic base_return
        op up to rounding."""
        dm = self.sigma * self.ensemble.increments
        vals = np.zeros((dm.shape[0], dm.shape[1] + 1))
        np.cumsum(dm, axis=1, out=vals[:, 1:])
        vals[:, 1:] += np.cumsum(self.lam * dm ** 2, axis=1)
        return PathProcess(self.times, vals)

    def wealth(self, pi, x0: float = 1.0, r=None) -> PathProcess:
        """Multiplicative wealth along each path (absorbed at 0 if a step
        return times pi falls below -1)."""
        ret = self.return_process() if r is None else r
        h = np.asarray(pi, dtype=float)
        factors = 1.0 + (h if h.ndim else float(h)) * ret.increments()
        factors = np.where(factors > 0.0, factors, 0.0)
        vals = np.empty((factors.shape[0], factors.shape[1] + 1))
        vals[:, 0] = x0
        vals[:, 1:] = x0 * np.cumprod(factors, axis=1)
        return PathProcess(self.times, vals)
