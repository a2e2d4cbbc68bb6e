"""Terminal utility fields with closed-form conjugates.

Three families ship: log, CRRA with relative risk aversion gamma (> 0,
!= 1), and CRRA with a strictly positive bounded weight per leaf of a tree.
All are strictly increasing, strictly concave and differentiable on
(0, inf) with infinite marginal at 0 and vanishing marginal at infinity;
the value at 0 is the right limit and may be -inf.

Conjugates V(y) = sup_x (U(x) - x y) are evaluated from closed forms only;
the grid-based supremum appears exclusively in test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LogUtility",
    "Crra",
    "WeightedCrra",
    "utility_from_config",
    "check_rra_bounds",
    "RraReport",
]


def _check_wealth(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("wealth must be nonnegative")
    return x


def _check_marginal(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("marginal utility argument must be positive")
    return y


class LogUtility:
    """U(x) = log x; V(y) = -log y - 1."""

    name = "log"

    def weight(self, leaf=None):
        return 1.0

    def u(self, x, leaf=None):
        x = _check_wealth(x)
        with np.errstate(divide="ignore"):
            out = np.log(x)
        return out if out.ndim else float(out)

    def u_prime(self, x, leaf=None):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise ValueError("marginal utility needs positive wealth")
        out = 1.0 / x
        return out if out.ndim else float(out)

    def v(self, y, leaf=None):
        y = _check_marginal(y)
        out = -np.log(y) - 1.0
        return out if out.ndim else float(out)

    def v_prime(self, y, leaf=None):
        y = _check_marginal(y)
        out = -1.0 / y
        return out if out.ndim else float(out)

    def inverse_marginal(self, y, leaf=None):
        return -self.v_prime(y, leaf)

    def v_at_zero(self, leaf=None) -> float:
        return np.inf  # sup of log is unbounded

    def u_at_zero(self, leaf=None) -> float:
        return -np.inf


@dataclass(frozen=True)
class Crra:
    """U(x) = x^(1-gamma) / (1-gamma); V(y) = gamma/(1-gamma) y^(1-1/gamma)."""

    gamma: float
    name = "crra"

    def __post_init__(self):
        if self.gamma <= 0 or self.gamma == 1.0:
            raise ValueError("CRRA needs gamma > 0, gamma != 1 (gamma = 1 is log)")

    def weight(self, leaf=None):
        return 1.0

    def u(self, x, leaf=None):
        x = _check_wealth(x)
        g = self.gamma
        with np.errstate(divide="ignore"):
            out = np.where(x > 0, x ** (1.0 - g) / (1.0 - g),
                           0.0 if g < 1 else -np.inf)
        return out if out.ndim else float(out)

    def u_prime(self, x, leaf=None):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise ValueError("marginal utility needs positive wealth")
        out = x ** (-self.gamma)
        return out if out.ndim else float(out)

    def v(self, y, leaf=None):
        y = _check_marginal(y)
        g = self.gamma
        out = (g / (1.0 - g)) * y ** (1.0 - 1.0 / g)
        return out if out.ndim else float(out)

    def v_prime(self, y, leaf=None):
        y = _check_marginal(y)
        out = -(y ** (-1.0 / self.gamma))
        return out if out.ndim else float(out)

    def inverse_marginal(self, y, leaf=None):
        return -self.v_prime(y, leaf)

    def v_at_zero(self, leaf=None) -> float:
        return 0.0 if self.gamma > 1 else np.inf

    def u_at_zero(self, leaf=None) -> float:
        return 0.0 if self.gamma < 1 else -np.inf


class WeightedCrra:
    """U(x) = D_leaf x^(1-gamma) / (1-gamma) with strictly positive bounded
    leaf weights D; V(y) = D^(1/gamma) gamma/(1-gamma) y^(1-1/gamma)."""

    name = "weighted_crra"

    def __init__(self, gamma: float, weights):
        if gamma <= 0 or gamma == 1.0:
            raise ValueError("CRRA needs gamma > 0, gamma != 1")
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("leaf weights must be strictly positive and bounded")
        self.gamma = float(gamma)
        self.weights = w

    def weight(self, leaf=None):
        if leaf is None:
            raise ValueError("weighted CRRA needs a leaf index")
        return self.weights[leaf]

    def u(self, x, leaf=None):
        d = self.weight(leaf)
        x = _check_wealth(x)
        g = self.gamma
        with np.errstate(divide="ignore"):
            out = np.where(x > 0, d * x ** (1.0 - g) / (1.0 - g),
                           0.0 if g < 1 else -np.inf)
        return out if out.ndim else float(out)

    def u_prime(self, x, leaf=None):
        d = self.weight(leaf)
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise ValueError("marginal utility needs positive wealth")
        out = d * x ** (-self.gamma)
        return out if out.ndim else float(out)

    def v(self, y, leaf=None):
        d = self.weight(leaf)
        y = _check_marginal(y)
        g = self.gamma
        out = d ** (1.0 / g) * (g / (1.0 - g)) * y ** (1.0 - 1.0 / g)
        return out if out.ndim else float(out)

    def v_prime(self, y, leaf=None):
        d = self.weight(leaf)
        y = _check_marginal(y)
        out = -((y / d) ** (-1.0 / self.gamma))
        return out if out.ndim else float(out)

    def inverse_marginal(self, y, leaf=None):
        return -self.v_prime(y, leaf)

    def v_at_zero(self, leaf=None) -> float:
        return 0.0 if self.gamma > 1 else np.inf

    def u_at_zero(self, leaf=None) -> float:
        return 0.0 if self.gamma < 1 else -np.inf


def utility_from_config(cfg: dict, leaf_weights=None):
    """Build a utility field from a config block {'family': tag, ...}.

    ``leaf_weights`` (from the tree definition file) back the weighted
    family when the config block does not embed its own weights.
    """
    fam = cfg.get("family")
    if fam == "log":
        return LogUtility()
    if fam == "crra":
        if "gamma" not in cfg:
            raise ValueError("utility.gamma is required for the crra family")
        return Crra(float(cfg["gamma"]))
    if fam == "weighted_crra":
        if "gamma" not in cfg:
            raise ValueError("utility.gamma is required for the weighted_crra family")
        w = cfg.get("weights", leaf_weights)
        if w is None:
            raise ValueError(
                "utility.weights (or tree utility_weights) required for weighted_crra"
            )
        return WeightedCrra(float(cfg["gamma"]), w)
    raise ValueError(f"unknown utility family {fam!r}")


# ---------------------------------------------------------------------------
# Marginal-ratio bounds
# ---------------------------------------------------------------------------

@dataclass
class RraReport:
    gamma1: float
    gamma2: float
    n_checked: int
    violations: list
    max_excess: float

    @property
    def passed(self) -> bool:
        return not self.violations


def check_rra_bounds(field, gamma1: float, gamma2: float,
                     x_grid, z_grid, leaf=None, rtol: float = 1e-12) -> RraReport:
    """Verify the two marginal-ratio bounds

        U'(z x) <= z^(-gamma1) U'(x)   and   -V'(z x) <= -V'(x) z^(-gamma2)

    pointwise over a grid of x > 0 and dampening factors z in (0, 1].
    Report style: violations are listed, nothing raises.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    z_grid = np.asarray(z_grid, dtype=float)
    if np.any(x_grid <= 0):
        raise ValueError("x grid must be positive")
    if np.any(z_grid <= 0) or np.any(z_grid > 1):
        raise ValueError("z grid must lie in (0, 1]")
    violations = []
    max_excess = 0.0
    n = 0
    for z in z_grid:
        lhs1 = field.u_prime(z * x_grid, leaf)
        rhs1 = z ** (-gamma1) * field.u_prime(x_grid, leaf)
        lhs2 = -field.v_prime(z * x_grid, leaf)
        rhs2 = -field.v_prime(x_grid, leaf) * z ** (-gamma2)
        for tag, lhs, rhs in (("marginal", lhs1, rhs1), ("conjugate", lhs2, rhs2)):
            excess = lhs - rhs * (1.0 + rtol)
            bad = np.flatnonzero(excess > 0)
            n += x_grid.size
            if bad.size:
                max_excess = max(max_excess, float(np.max(excess[bad] / np.abs(rhs[bad]))))
                for b in bad[:5]:
                    violations.append((tag, float(x_grid[b]), float(z)))
    return RraReport(gamma1=gamma1, gamma2=gamma2, n_checked=n,
                     violations=violations, max_excess=max_excess)
