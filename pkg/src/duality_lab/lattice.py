"""Finite filtration trees, simulated path ensembles, and the discrete
stochastic-calculus primitives (quadratic variation, stochastic integrals,
stochastic exponentials) shared by every other module.

Two containers are supported:

* ``FiltrationTree`` / ``TreeProcess`` -- an explicit event tree with one
  node per history, strictly positive branch probabilities and a trivial
  root sigma-field.  Conditional expectations are exact sums.
* ``PathEnsemble`` / ``PathProcess`` -- a Monte Carlo panel of Gaussian
  increments with a counter-based seeding scheme, so the same seed yields
  a bit-identical ensemble regardless of how work is chunked.

Convention for quadratic variation: trees use the predictable
(conditional-variance) bracket by default, ensembles the realized one.
The O(dt) gap between the two is measured, not hidden.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "FiltrationTree",
    "TreeProcess",
    "PathEnsemble",
    "PathProcess",
    "quadratic_variation",
    "stochastic_integral",
    "stochastic_exponential",
    "base_return",
]

# Fixed path-chunk width for the counter-based RNG scheme.  Chunk c of an
# ensemble is always drawn from Philox(key=(seed, c)), so the layout of
# worker processes can never reorder the randomness.
RNG_CHUNK = 4096


# ---------------------------------------------------------------------------
# Time grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing instants t_0 = 0 < t_1 < ... < t_N = horizon."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two instants")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if horizon <= 0 or n_steps < 1:
            raise ValueError("horizon must be > 0 and n_steps >= 1")
        return cls(np.linspace(0.0, horizon, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def halved(self) -> "TimeGrid":
        """Grid with every step split in two (used by convergence studies)."""
        t = self.times
        mid = 0.5 * (t[:-1] + t[1:])
        out = np.empty(2 * self.n_steps + 1)
        out[0::2] = t
        out[1::2] = mid
        return TimeGrid(out)


# ---------------------------------------------------------------------------
# Filtration trees
# ---------------------------------------------------------------------------

class FiltrationTree:
    """Finite event tree: one node per history, probabilities on branches.

    Nodes are integers 0..n_nodes-1 in topological order (parents precede
    children).  ``parent[0] == -1`` and the root carries branch probability
    1.  Every leaf sits at the final instant of the time grid.
    """

    def __init__(self, times: TimeGrid, parent: np.ndarray, branch_prob: np.ndarray):
        self.times = times
        self.parent = np.asarray(parent, dtype=np.int64)
        self.branch_prob = np.asarray(branch_prob, dtype=float)
        self._validate_and_index()

    def _validate_and_index(self) -> None:
        n = self.parent.size
        if n == 0 or self.parent[0] != -1:
            raise ValueError("node 0 must be the root (parent -1)")
        if np.any(self.parent[1:] < 0) or np.any(self.parent[1:] >= np.arange(1, n)):
            raise ValueError("parents must precede children in node order")
        if self.branch_prob.size != n:
            raise ValueError("branch_prob must have one entry per node")
        if self.branch_prob[0] != 1.0:
            raise ValueError("root branch probability must be 1")
        if np.any(self.branch_prob[1:] <= 0.0):
            raise ValueError("branch probabilities must be strictly positive")

        level = np.zeros(n, dtype=np.int64)
        for i in range(1, n):  # parents precede children
            level[i] = level[self.parent[i]] + 1
        self.level = level

        children: list[list[int]] = [[] for _ in range(n)]
        for i in range(1, n):
            children[self.parent[i]].append(i)
        self.children = [np.asarray(c, dtype=np.int64) for c in children]

        depth = int(level.max())
        if depth != self.times.n_steps:
            raise ValueError(
                f"tree depth {depth} does not match time grid with "
                f"{self.times.n_steps} steps"
            )
        for i in range(n):
            if len(self.children[i]) == 0 and level[i] != depth:
                raise ValueError(f"leaf node {i} is not at the final time")
            psum = self.branch_prob[self.children[i]].sum() if len(self.children[i]) else 1.0
            if len(self.children[i]) and abs(psum - 1.0) > 1e-12:
                raise ValueError(f"branch probabilities at node {i} sum to {psum}")

        self.levels = [np.flatnonzero(level == k) for k in range(depth + 1)]
        self.leaves = self.levels[-1]
        prob = np.ones(n)
        for i in range(1, n):
            prob[i] = prob[self.parent[i]] * self.branch_prob[i]
        self.node_prob = prob

    @property
    def n_nodes(self) -> int:
        return self.parent.size

    @property
    def n_periods(self) -> int:
        return self.times.n_steps

    def subtree_leaves(self, node: int) -> np.ndarray:
        """Leaves below ``node`` (the node itself if it is a leaf)."""
        stack = [node]
        out = []
        while stack:
            i = stack.pop()
            if len(self.children[i]) == 0:
                out.append(i)
            else:
                stack.extend(self.children[i].tolist())
        return np.asarray(sorted(out), dtype=np.int64)

    def ancestor_at(self, node: int, level: int) -> int:
        i = node
        while self.level[i] > level:
            i = self.parent[i]
        return i

    def one_step_expectation(self, values: np.ndarray) -> np.ndarray:
        """Per node, the branch-probability mean of its child values
        (E[X_{k+1} | node]); leaves keep their own value."""
        out = np.array(values, dtype=float, copy=True)
        for i in range(self.n_nodes):
            c = self.children[i]
            if len(c):
                out[i] = float(np.dot(self.branch_prob[c], values[c]))
        return out

    def condexp_from_leaves(self, leaf_values: np.ndarray) -> np.ndarray:
        """Full node array of E[terminal value | node] via backward sums."""
        v = np.zeros(self.n_nodes)
        v[self.leaves] = np.asarray(leaf_values, dtype=float)
        for k in range(self.n_periods - 1, -1, -1):
            for i in self.levels[k]:
                c = self.children[i]
                v[i] = float(np.dot(self.branch_prob[c], v[c]))
        return v


@dataclass
class TreeProcess:
    """Adapted process on a tree: one real value per node."""

    tree: FiltrationTree
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.tree.n_nodes,):
            raise ValueError("adapted process needs one value per node")

    def increments(self) -> np.ndarray:
        """Value minus parent value, 0 at the root (branch into each node)."""
        dx = np.zeros_like(self.values)
        dx[1:] = self.values[1:] - self.values[self.tree.parent[1:]]
        return dx

    def at_level(self, k: int) -> np.ndarray:
        return self.values[self.tree.levels[k]]


def tree_control(tree: FiltrationTree, values) -> np.ndarray:
    """Predictable control: one value per node, applied on the outgoing step.

    Scalars broadcast to every node.  Values at leaves are carried but never
    used.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full(tree.n_nodes, float(arr))
    if arr.shape != (tree.n_nodes,):
        raise ValueError("control must be scalar or one value per node")
    if not np.all(np.isfinite(arr)):
        raise ValueError("control values must be finite")
    return arr


# ---------------------------------------------------------------------------
# Path ensembles
# ---------------------------------------------------------------------------

@dataclass
class PathEnsemble:
    """Panel of Gaussian increments with counter-based substreams.

    Increment (i, k) is N(0, dt_k).  Paths are organized in fixed chunks of
    ``RNG_CHUNK``; chunk c is drawn from ``Philox(key=(seed, c))``, so path i
    lives in substream i // RNG_CHUNK at offset i % RNG_CHUNK.  The draw is a
    pure function of (seed, n_paths, grid) and is unaffected by how callers
    parallelize over chunks.
    """

    seed: int
    times: TimeGrid
    increments: np.ndarray
    substream: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.substream is None:
            self.substream = np.arange(self.n_paths) // RNG_CHUNK

    @classmethod
    def generate(cls, seed: int, n_paths: int, times: TimeGrid) -> "PathEnsemble":
        if n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        n_steps = times.n_steps
        z = np.empty((n_paths, n_steps))
        for c0 in range(0, n_paths, RNG_CHUNK):
            c1 = min(c0 + RNG_CHUNK, n_paths)
            key = np.array([seed, c0 // RNG_CHUNK], dtype=np.uint64)
            gen = np.random.Generator(np.random.Philox(key=key))
            # equals the leading slice of the full chunk (row-major fill)
            z[c0:c1] = gen.standard_normal((c1 - c0, n_steps))
        inc = z * np.sqrt(times.dt)[None, :]
        return cls(seed=seed, times=times, increments=inc)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    def coarsened(self, factor: int) -> "PathEnsemble":
        """Aggregate consecutive increments; the Brownian path is shared
        between refinement levels, which convergence studies rely on."""
        n_steps = self.times.n_steps
        if n_steps % factor:
            raise ValueError("coarsening factor must divide the step count")
        inc = self.increments.reshape(self.n_paths, n_steps // factor, factor).sum(axis=2)
        grid = TimeGrid(self.times.times[::factor])
        return PathEnsemble(seed=self.seed, times=grid, increments=inc,
                            substream=self.substream)


@dataclass
class PathProcess:
    """Adapted process on an ensemble: (n_paths, n_steps + 1) values."""

    times: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.times.n_steps + 1:
            raise ValueError("path process needs n_steps + 1 values per path")

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]


def path_control(times: TimeGrid, n_paths: int, values) -> np.ndarray:
    """Predictable control on an ensemble as an (n_paths, n_steps) array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full((n_paths, times.n_steps), float(arr))
    if arr.ndim == 1 and arr.size == times.n_steps:
        return np.broadcast_to(arr, (n_paths, times.n_steps)).copy()
    if arr.shape == (n_paths, times.n_steps):
        return arr
    raise ValueError("control must be scalar, per-step, or per (path, step)")


def counter_normals(seed: int, n_rows: int, n_cols: int, stream: int = 0) -> np.ndarray:
    """Standard normal draws under the counter-based scheme.

    Row block c (width ``RNG_CHUNK``) of stream s is drawn from
    ``Philox(key=(seed, s * 2^32 + c))``; the result is a pure function of
    (seed, stream, shape), independent of any parallel layout.
    """
    out = np.empty((n_rows, n_cols))
    for c0 in range(0, n_rows, RNG_CHUNK):
        c1 = min(c0 + RNG_CHUNK, n_rows)
        key = np.array([seed, (stream << 32) | (c0 // RNG_CHUNK)], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        # drawing only c1 - c0 rows equals the leading slice of the full
        # chunk: the generator fills row-major from one stream
        out[c0:c1] = gen.standard_normal((c1 - c0, n_cols))
    return out


def _from_increments_tree(tree: FiltrationTree, dx_into_node: np.ndarray) -> np.ndarray:
    out = np.zeros(tree.n_nodes)
    for i in range(1, tree.n_nodes):
        out[i] = out[tree.parent[i]] + dx_into_node[i]
    return out


def _from_increments_paths(inc: np.ndarray) -> np.ndarray:
    out = np.zeros((inc.shape[0], inc.shape[1] + 1))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


# ---------------------------------------------------------------------------
# Calculus primitives
# ---------------------------------------------------------------------------

def quadratic_variation(x, mode: str = None):
    """Quadratic variation of an adapted process.

    mode 'predictable' accumulates the conditional mean of squared
    increments (trees only); 'realized' accumulates the squared increments
    themselves.  Defaults: predictable on trees, realized on ensembles.
    Both start at 0 and are nondecreasing.
    """
    if isinstance(x, TreeProcess):
        mode = mode or "predictable"
        if mode not in ("predictable", "realized"):
            raise ValueError(f"unknown quadratic variation mode {mode!r}")
        tree = x.tree
        dx = x.increments()
        if mode == "realized":
            return TreeProcess(tree, _from_increments_tree(tree, dx ** 2))
        # conditional variance of the step out of each node
        step_var = np.zeros(tree.n_nodes)
        np.add.at(step_var, tree.parent[1:], tree.branch_prob[1:] * dx[1:] ** 2)
        dqv = np.zeros(tree.n_nodes)
        dqv[1:] = step_var[tree.parent[1:]]
        return TreeProcess(tree, _from_increments_tree(tree, dqv))
    if isinstance(x, PathProcess):
        mode = mode or "realized"
        if mode == "predictable":
            raise ValueError(
                "predictable quadratic variation needs a tree; ensembles use"
                " mode='realized'"
            )
        if mode != "realized":
            raise ValueError(f"unknown quadratic variation mode {mode!r}")
        return PathProcess(x.times, _from_increments_paths(x.increments() ** 2))
    raise TypeError("expected a TreeProcess or PathProcess")


def stochastic_integral(h, x):
    """Cumulative sum of H * (increment of X); starts at 0.

    ``h`` is a predictable control (see ``tree_control`` / ``path_control``),
    evaluated at the left endpoint of each step.
    """
    if isinstance(x, TreeProcess):
        tree = x.tree
        hh = tree_control(tree, h)
        dx = x.increments()
        di = np.zeros_like(dx)
        di[1:] = hh[tree.parent[1:]] * dx[1:]
        return TreeProcess(tree, _from_increments_tree(tree, di))
    if isinstance(x, PathProcess):
        hh = path_control(x.times, x.values.shape[0], h)
        return PathProcess(x.times, _from_increments_paths(hh * x.increments()))
    raise TypeError("expected a TreeProcess or PathProcess")


def stochastic_exponential(x, variant: str = "multiplicative"):
    """Stochastic exponential of X, started at 1.

    'multiplicative' compounds 1 + dX step by step and is absorbed at 0 from
    the first step with 1 + dX <= 0 (a contract, not an error); this keeps
    discrete wealth exactly self-financing.  'exponential' returns
    exp(X - X_0 - qv/2) with the container's default bracket.
    """
    if variant == "multiplicative":
        if isinstance(x, TreeProcess):
            tree = x.tree
            factors = 1.0 + x.increments()
            out = np.ones(tree.n_nodes)
            for i in range(1, tree.n_nodes):
                f = factors[i]
                out[i] = out[tree.parent[i]] * f if f > 0.0 else 0.0
            return TreeProcess(tree, out)
        if isinstance(x, PathProcess):
            factors = 1.0 + x.increments()
            factors = np.where(factors > 0.0, factors, 0.0)
            vals = np.ones_like(x.values)
            np.cumprod(factors, axis=1, out=vals[:, 1:])
            return PathProcess(x.times, vals)
        raise TypeError("expected a TreeProcess or PathProcess")
    if variant == "exponential":
        qv = quadratic_variation(x)
        if isinstance(x, TreeProcess):
            expo = x.values - x.values[0] - 0.5 * qv.values
            return TreeProcess(x.tree, np.exp(expo))
        expo = x.values - x.values[:, :1] - 0.5 * qv.values
        return PathProcess(x.times, np.exp(expo))
    raise ValueError(f"unknown stochastic exponential variant {variant!r}")


def base_return(m, lam):
    """Base market return: M plus the integral of lambda against the bracket
    of M (predictable bracket on trees, realized on ensembles)."""
    qv = quadratic_variation(m)
    drift = stochastic_integral(lam, qv)
    if isinstance(m, TreeProcess):
        return TreeProcess(m.tree, m.values + drift.values)
    return PathProcess(m.times, m.values + drift.values)
