"""Run configuration: parsing, validation, canonical serialization.

Configs are JSON.  The raw mapping is kept untouched so that
parse -> serialize -> parse is the identity; defaults are applied at access
time.  Validation failures always name the offending key.

Top-level schema (see README for the full format):

    model         {"kind": "tree", "path": ...} or
                  {"kind": "bs", "sigma", "lam", "horizon", "n_steps", "n_paths"}
    utility       {"family": "crra"|"log"|"weighted_crra", ...}
    strategy      {"pi", "x0"}
    perturbation  {"psi", "theta", "variant", "nu"?, "eps_grid"?}
    checks        [check names]            (default: every known check)
    duality       {"t_grid", "n_random_trees", "n_pairs"}
    sensitivity   {"t_grid", "tree_t", "n_outer", "n_inner", "eps0"}
    convergence   {"eps", "n_levels"}
    probe         {"c_grid"}
    seed          integer
    out_dir       directory for results
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .market import BrownianMarket, TreeMarket, load_tree_market
from .lattice import PathEnsemble, TimeGrid
from .perturbation import PerturbationSpec
from .utility import utility_from_config

__all__ = ["ConfigError", "RunConfig", "ALL_CHECKS", "CHECK_GROUPS"]


class ConfigError(ValueError):
    pass


ALL_CHECKS = [
    "weak-duality",
    "weak-duality-random",
    "conjugacy",
    "optimality-relations",
    "polarity",
    "trivial-identities",
    "nupbr-deflator",
    "correction-derivative",
    "tilted-measure",
    "integrability-probe",
    "wealth-decomposition",
    "sensitivity-formula",
    "continuity",
]

CHECK_GROUPS = {
    "duality-check": ["weak-duality", "weak-duality-random", "conjugacy",
                      "optimality-relations", "polarity"],
    "perturb-check": ["trivial-identities", "nupbr-deflator",
                      "correction-derivative", "tilted-measure",
                      "integrability-probe"],
    "convergence": ["wealth-decomposition"],
    "sensitivity": ["sensitivity-formula", "continuity"],
    "all": ALL_CHECKS,
}


def _need(mapping, key, where):
    label = f"{where}.{key}" if where else key
    if not isinstance(mapping, dict):
        raise ConfigError(f"'{where or key}' must be a JSON object")
    if key not in mapping:
        raise ConfigError(f"missing key '{label}'")
    return mapping[key]


def _positive(value, key):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"'{key}' must be a number") from None
    if not np.isfinite(v) or v <= 0:
        raise ConfigError(f"'{key}' must be positive and finite")
    return v


class RunConfig:
    """Validated view over a raw JSON config mapping."""

    def __init__(self, raw: dict, base_dir: str = "."):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        self.raw = raw
        self.base_dir = base_dir
        self._validate()

    # -- construction -------------------------------------------------------

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls(raw, base_dir=os.path.dirname(os.path.abspath(path)))

    def serialize(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"

    def content_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode())
        if self.model_kind == "tree":
            with open(self.tree_path, "rb") as fh:
                h.update(fh.read())
        return h.hexdigest()

    # -- validation ---------------------------------------------------------

    def _validate(self) -> None:
        model = _need(self.raw, "model", "")
        kind = _need(model, "kind", "model")
        if kind == "tree":
            path = _need(model, "path", "model")
            if not os.path.exists(self._resolve(path)):
                raise ConfigError(f"'model.path' does not exist: {path}")
        elif kind == "bs":
            for key in ("sigma", "lam", "horizon"):
                _positive(_need(model, key, "model"), f"model.{key}")
            for key in ("n_steps", "n_paths"):
                v = _need(model, key, "model")
                if not isinstance(v, int) or v < 1:
                    raise ConfigError(f"'model.{key}' must be a positive integer")
        else:
            raise ConfigError(f"'model.kind' must be 'tree' or 'bs', got {kind!r}")

        util = _need(self.raw, "utility", "")
        fam = _need(util, "family", "utility")
        if fam not in ("crra", "log", "weighted_crra"):
            raise ConfigError(f"'utility.family' unknown: {fam!r}")
        if fam in ("crra", "weighted_crra"):
            g = _positive(_need(util, "gamma", "utility"), "utility.gamma")
            if g == 1.0:
                raise ConfigError("'utility.gamma' must differ from 1 (use family 'log')")

        strat = _need(self.raw, "strategy", "")
        _need(strat, "pi", "strategy")
        _positive(_need(strat, "x0", "strategy"), "strategy.x0")

        pert = _need(self.raw, "perturbation", "")
        for key in ("psi", "theta"):
            if key not in pert:
                raise ConfigError(f"missing key 'perturbation.{key}'")
        variant = pert.get("variant", "multiplicative")
        if variant not in ("multiplicative", "additive"):
            raise ConfigError(f"'perturbation.variant' unknown: {variant!r}")
        if variant == "additive" and "nu" not in pert:
            raise ConfigError("'perturbation.nu' is required for the additive variant")
        eps_grid = pert.get("eps_grid", [0.05])
        if not isinstance(eps_grid, list) or not eps_grid:
            raise ConfigError("'perturbation.eps_grid' must be a nonempty list")

        checks = self.raw.get("checks", ALL_CHECKS)
        if not isinstance(checks, list):
            raise ConfigError("'checks' must be a list of check names")
        for c in checks:
            if c not in ALL_CHECKS:
                raise ConfigError(f"unknown check name {c!r} in 'checks'")

        seed = self.raw.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("'seed' must be a nonnegative integer")

        sens = self.raw.get("sensitivity", {})
        for key in ("n_outer", "n_inner"):
            if key in sens and (not isinstance(sens[key], int) or sens[key] < 1):
                raise ConfigError(f"'sensitivity.{key}' must be a positive integer")
        if "eps0" in sens:
            _positive(sens["eps0"], "sensitivity.eps0")

    def _resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    # -- accessors ----------------------------------------------------------

    @property
    def model_kind(self) -> str:
        return self.raw["model"]["kind"]

    @property
    def tree_path(self) -> str:
        return self._resolve(self.raw["model"]["path"])

    @property
    def seed(self) -> int:
        return self.raw.get("seed", 0)

    @property
    def out_dir(self) -> str:
        return self._resolve(self.raw.get("out_dir", "out"))

    @property
    def checks(self) -> list:
        return list(self.raw.get("checks", ALL_CHECKS))

    @property
    def pi(self) -> float:
        return float(self.raw["strategy"]["pi"])

    @property
    def x0(self) -> float:
        return float(self.raw["strategy"]["x0"])

    @property
    def eps_grid(self) -> list:
        return [float(e) for e in self.raw["perturbation"].get("eps_grid", [0.05])]

    def perturbation_spec(self) -> PerturbationSpec:
        pert = self.raw["perturbation"]
        return PerturbationSpec(
            psi=pert["psi"], theta=pert["theta"],
            variant=pert.get("variant", "multiplicative"),
            nu=pert.get("nu"),
            psi_max=pert.get("psi_max"),
        )

    def tree_market(self) -> TreeMarket:
        if self.model_kind != "tree":
            raise ConfigError("this run needs 'model.kind' = 'tree'")
        return load_tree_market(self.tree_path)

    def utility(self, market: TreeMarket | None = None):
        weights = market.utility_weights if market is not None else None
        try:
            return utility_from_config(self.raw["utility"], leaf_weights=weights)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def bs_params(self) -> dict:
        if self.model_kind != "bs":
            raise ConfigError("this run needs 'model.kind' = 'bs'")
        m = self.raw["model"]
        return {"sigma": float(m["sigma"]), "lam": float(m["lam"]),
                "horizon": float(m["horizon"]), "n_steps": int(m["n_steps"]),
                "n_paths": int(m["n_paths"])}

    def brownian_market(self, seed: int | None = None) -> BrownianMarket:
        p = self.bs_params()
        grid = TimeGrid.uniform(p["horizon"], p["n_steps"])
        ens = PathEnsemble.generate(self.seed if seed is None else seed,
                                    p["n_paths"], grid)
        return BrownianMarket(sigma=p["sigma"], lam=p["lam"], ensemble=ens)

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))
