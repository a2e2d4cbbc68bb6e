"""Experiment orchestration for the command-line harness.

Executes the selected checks in declared order against one configured
model, writes delimited results (CSV), one JSON certificate per check, and
a JSON-lines manifest.  Identical (config, seed) produce byte-identical
CSVs regardless of --jobs: randomness is counter-based per fixed-size
chunk, parallel work is dispatched over those same chunks, and partial
results are reduced in chunk order.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import CHECK_GROUPS, ConfigError, RunConfig
from .duality import (
    check_conjugacy,
    check_optimality_relations,
    check_polarity,
    check_weak_duality,
    solve_pair,
)
from .lattice import RNG_CHUNK
from .market import random_tree_market
from .perturbation import (
    PerturbationSpec,
    correction_process,
    integrability_probe,
    nupbr_deflator_check,
    nupbr_deflator_check_paths,
    perturbed_market,
    perturbed_return_paths,
    tilted_measure_tree,
    TiltedMeasure,
    wealth_decomposition_check,
)
from .sensitivity import (
    ClosedFormMerton,
    McDraws,
    SensitivityReport,
    continuity_check,
    derivative_formula_tree,
    finite_difference_derivative,
    indirect_utility_mc,
    indirect_utility_tree,
)
from .utility import Crra, LogUtility

__all__ = ["Runner", "CheckOutcome", "chunked_map"]


def chunked_map(fn, n_items: int, jobs: int = 1, chunk: int = RNG_CHUNK) -> list:
    """Apply fn(start, stop) over fixed-width ranges of [0, n_items).

    The chunk layout never depends on ``jobs``; results are returned in
    chunk order, so any reduction is reproducible across worker counts.
    """
    ranges = [(a, min(a + chunk, n_items)) for a in range(0, n_items, chunk)]
    if jobs <= 1 or len(ranges) == 1:
        return [fn(a, b) for a, b in ranges]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        futures = [ex.submit(fn, a, b) for a, b in ranges]
        return [f.result() for f in futures]


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    skipped: bool = False
    summary: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"check": self.name, "passed": self.passed,
                "skipped": self.skipped, "summary": self.summary}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


class Runner:
    """One configured run: selected checks, persisted results, manifest."""

    def __init__(self, config: RunConfig, jobs: int = 1,
                 seed: int | None = None, out_dir: str | None = None):
        self.config = config
        self.jobs = max(1, int(jobs))
        self.seed = config.seed if seed is None else int(seed)
        self.out_dir = config.out_dir if out_dir is None else out_dir
        self.spec = config.perturbation_spec()
        self._csv_rows: dict = {}

    # -- public entry --------------------------------------------------------

    def run(self, checks: list | None = None) -> dict:
        selected = checks if checks is not None else self.config.checks
        for name in selected:
            if name not in CHECK_GROUPS["all"]:
                raise ConfigError(f"unknown check {name!r}")
        os.makedirs(self.out_dir, exist_ok=True)
        self._csv_rows = {
            "sensitivity": [],
            "continuity": [],
            "convergence": [],
        }
        csv_owner = {"sensitivity-formula": "sensitivity",
                     "continuity": "continuity",
                     "wealth-decomposition": "convergence"}
        touched = {csv_owner[name] for name in selected if name in csv_owner}
        outcomes = []
        t_start = time.perf_counter()
        for name in selected:
            outcome = getattr(self, "_check_" + name.replace("-", "_"))()
            outcomes.append(outcome)
            self._write_certificate(outcome)
        self._emit_plot_data(touched)
        wall = time.perf_counter() - t_start
        manifest = {
            "config_hash": self.config.content_hash(),
            "seed": self.seed,
            "jobs": self.jobs,
            "version": __version__,
            "checks": {o.name: ("skipped" if o.skipped else bool(o.passed))
                       for o in outcomes},
            "wall_clock_s": wall,
        }
        self._append_manifest(manifest)
        manifest["all_passed"] = all(o.passed for o in outcomes)
        return manifest

    # -- persistence ---------------------------------------------------------

    def _write_certificate(self, outcome: CheckOutcome) -> None:
        path = os.path.join(self.out_dir, f"cert_{outcome.name}.json")
        payload = _jsonable({
            "instance": self.config.content_hash(),
            "seed": self.seed,
            **outcome.to_json(),
        })
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    def _append_manifest(self, manifest: dict) -> None:
        path = os.path.join(self.out_dir, "manifest.jsonl")
        line = json.dumps(_jsonable(manifest), sort_keys=True)
        tmp = path + ".tmp"
        existing = ""
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                existing = fh.read()
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(existing + line + "\n")
        os.replace(tmp, path)

    def _emit_plot_data(self, touched: set) -> None:
        """Delimited tables for external plotting.  A table is (re)written
        iff its owning check was selected this run; an empty sweep leaves a
        header-only table."""
        headers = {
            "sensitivity": ["t", "eps", "value", "se"],
            "continuity": ["t", "eps", "value", "se", "abs_slope"],
            "convergence": ["dt", "mean_error", "log2_error", "measured_order"],
        }
        for name, rows in self._csv_rows.items():
            if name not in touched:
                continue
            path = os.path.join(self.out_dir, f"{name}.csv")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(",".join(headers[name]) + "\n")
                for row in rows:
                    fh.write(",".join(_fmt(v) for v in row) + "\n")

    # -- model plumbing ------------------------------------------------------

    def _skip(self, name: str, why: str) -> CheckOutcome:
        return CheckOutcome(name=name, passed=True, skipped=True,
                            summary={"reason": why})

    def _closed_form(self) -> ClosedFormMerton:
        p = self.config.bs_params()
        util = self.config.raw["utility"]
        gamma = 1.0 if util["family"] == "log" else float(util["gamma"])
        psi, theta = np.asarray(self.spec.psi), np.asarray(self.spec.theta)
        if psi.ndim or theta.ndim:
            raise ConfigError(
                "closed-form Brownian checks need constant perturbation.psi/theta")
        return ClosedFormMerton(
            sigma=p["sigma"], lam=p["lam"], horizon=p["horizon"], gamma=gamma,
            pi=self.config.pi, x0=self.config.x0,
            psi=float(psi), theta=float(theta),
        )

    # -- duality checks ------------------------------------------------------

    def _check_weak_duality(self) -> CheckOutcome:
        if self.config.model_kind != "tree":
            return self._skip("weak-duality", "needs a tree model")
        market = self.config.tree_market()
        fieldu = self.config.utility(market)
        d = self.config.section("duality")
        n_pairs = int(d.get("n_pairs", 5))
        t_grid = d.get("t_grid", [0])
        rng = np.random.default_rng(self.seed)
        worst = -np.inf
        for t in t_grid:
            for _ in range(n_pairs):
                xi = rng.uniform(0.2, 3.0)
                eta = rng.uniform(0.2, 3.0)
                rep = check_weak_duality(market, fieldu, xi, eta, t=int(t))
                worst = max(worst, rep.gaps["max_gap"])
        tol = float(d.get("weak_duality_tol", 1e-8))
        return CheckOutcome("weak-duality", bool(worst <= tol),
                            summary={"max_gap": worst, "tol": tol,
                                     "n_pairs": n_pairs, "t_grid": t_grid})

    def _check_weak_duality_random(self) -> CheckOutcome:
        d = self.config.section("duality")
        n_trees = int(d.get("n_random_trees", 50))
        n_pairs = int(d.get("n_pairs", 5))
        tol = float(d.get("weak_duality_tol", 1e-8))
        rng = np.random.default_rng(self.seed + 1)
        worst = -np.inf
        families = (Crra(0.5), Crra(2.0), LogUtility())
        for s in range(n_trees):
            market = random_tree_market(seed=self.seed * 1000 + s)
            for fam in families:
                for _ in range(n_pairs):
                    xi = rng.uniform(0.2, 3.0)
                    eta = rng.uniform(0.2, 3.0)
                    rep = check_weak_duality(market, fam, xi, eta, t=0)
                    worst = max(worst, rep.gaps["max_gap"])
        return CheckOutcome("weak-duality-random", bool(worst <= tol),
                            summary={"max_gap": worst, "tol": tol,
                                     "n_trees": n_trees})

    def _check_conjugacy(self) -> CheckOutcome:
        if self.config.model_kind != "tree":
            return self._skip("conjugacy", "needs a tree model")
        market = self.config.tree_market()
        fieldu = self.config.utility(market)
        d = self.config.section("duality")
        tol = float(d.get("conjugacy_tol", 1e-5))
        worst = 0.0
        ok = True
        for t in d.get("t_grid", [0, 1]):
            rep = check_conjugacy(market, fieldu, t=int(t), tol=tol)
            worst = max(worst, max(rep.gaps.values()))
            ok = ok and rep.passed
        return CheckOutcome("conjugacy", bool(ok),
                            summary={"max_gap": worst, "tol": tol})

    def _check_optimality_relations(self) -> CheckOutcome:
        if self.config.model_kind != "tree":
            return self._skip("optimality-relations", "needs a tree model")
        market = self.config.tree_market()
        fieldu = self.config.utility(market)
        d = self.config.section("duality")
        ok = True
        gaps = {}
        for t in d.get("t_grid", [0, 1]):
            sol = solve_pair(market, fieldu, self.config.x0, t=int(t))
            rep = check_optimality_relations(sol)
            ok = ok and rep.passed
            for k, v in rep.gaps.items():
                gaps[k] = max(gaps.get(k, 0.0), v)
        return CheckOutcome("optimality-relations", bool(ok), summary=gaps)

    def _check_polarity(self) -> CheckOutcome:
        if self.config.model_kind != "tree":
            return self._skip("polarity", "needs a tree model")
        market = self.config.tree_market()
        rep = check_polarity(market, t=0, n_samples=40, seed=self.seed)
        return CheckOutcome("polarity", rep.passed,
                            summary={**rep.gaps, **rep.details})

    # -- perturbation checks --------------------------------------------------

    def _check_trivial_identities(self) -> CheckOutcome:
        checks = {}
        if self.config.model_kind == "tree":
            market = self.config.tree_market()
            fieldu = self.config.utility(market)
            m0 = perturbed_market(market, self.spec, 0.0)
            checks["return_identity"] = bool(np.array_equal(m0.dr0, market.dr0))
            l0 = correction_process(market, self.spec, 0.0).l_process.values
            checks["correction_identity"] = bool(np.all(l0 == 1.0))
            spec0 = PerturbationSpec(psi=self.spec.psi, theta=0.0)
            der = derivative_formula_tree(market, fieldu, spec0,
                                          self.config.pi, self.config.x0, 0)
            checks["zero_theta_derivative"] = bool(np.all(der == 0.0))
            n = market.tree.n_periods
            j_T = indirect_utility_tree(market, fieldu, self.spec,
                                        self.config.pi, self.config.x0, n,
                                        float(self.config.eps_grid[0]))
            m_eps = perturbed_market(market, self.spec, float(self.config.eps_grid[0]))
            x_T = m_eps.wealth(self.config.pi, x0=self.config.x0).values[market.tree.leaves]
            direct = np.array([fieldu.u(x, i) for i, x in enumerate(x_T)])
            checks["terminal_identity"] = bool(np.array_equal(j_T.values, direct))
        else:
            bm = self.config.brownian_market()
            r_eps = perturbed_return_paths(bm, self.spec, 0.0)
            checks["return_identity"] = bool(
                np.array_equal(r_eps.values, bm.return_process().values))
            l0 = correction_process(bm, self.spec, 0.0).l_process.values
            checks["correction_identity"] = bool(np.all(l0 == 1.0))
            cf = self._closed_form()
            cf0 = ClosedFormMerton(sigma=cf.sigma, lam=cf.lam, horizon=cf.horizon,
                                   gamma=cf.gamma, pi=cf.pi, x0=cf.x0,
                                   psi=cf.psi, theta=0.0)
            checks["zero_theta_derivative"] = bool(cf0.derivative(0.0, 0.0) == 0.0)
            eps = float(self.config.eps_grid[0])
            x = np.linspace(0.5, 2.0, 7)
            checks["terminal_identity"] = bool(
                np.array_equal(cf.value(x, cf.horizon, eps), cf.utility(x)))
        return CheckOutcome("trivial-identities", all(checks.values()),
                            summary=checks)

    def _check_nupbr_deflator(self) -> CheckOutcome:
        grid = sorted({0.0} | {e for g in self.config.eps_grid for e in (g, -g)})
        if self.config.model_kind == "tree":
            market = self.config.tree_market()
            rep = nupbr_deflator_check(market, self.spec, grid, n_wealth=50,
                                       seed=self.seed)
        else:
            bm = self.config.brownian_market()
            rep = nupbr_deflator_check_paths(bm, self.spec, grid,
                                             pi_samples=[0.0, self.config.pi, 1.0])
        return CheckOutcome("nupbr-deflator", rep.passed,
                            summary={"max_residual": rep.max_residual,
                                     "eps_grid": rep.eps_grid})

    def _check_correction_derivative(self) -> CheckOutcome:
        if self.config.model_kind != "bs":
            return self._skip("correction-derivative", "needs a Brownian model")
        bm = self.config.brownian_market()
        worst = 0.0
        for eps in [0.0] + self.config.eps_grid:
            corr = correction_process(bm, self.spec, eps)
            de = 1e-5
            up = correction_process(bm, self.spec, eps + de).l_process.terminal
            dn = correction_process(bm, self.spec, eps - de).l_process.terminal
            fd = (up - dn) / (2 * de)
            an = corr.l_derivative_terminal()
            scale = np.maximum(np.abs(an), 1.0)
            worst = max(worst, float(np.max(np.abs(fd - an) / scale)))
        corr0 = correction_process(bm, self.spec, 0.0)
        f_ok = bool(np.array_equal(corr0.l_derivative_terminal(), corr0.terminal_f))
        inv_ok = bool(np.array_equal(corr0.inv_l_derivative_terminal(),
                                     -corr0.terminal_f))
        tol = 1e-8  # second-order central differences at de = 1e-5
        return CheckOutcome("correction-derivative",
                            bool(worst <= tol and f_ok and inv_ok),
                            summary={"max_fd_gap": worst, "f_identity": f_ok,
                                     "inv_identity": inv_ok})

    def _check_tilted_measure(self) -> CheckOutcome:
        if self.config.model_kind != "tree":
            return self._skip("tilted-measure", "needs a tree model")
        market = self.config.tree_market()
        fieldu = self.config.utility(market)
        tree = market.tree
        gaps = {}
        ok = True
        for t in self.config.section("duality").get("t_grid", [0, 1]):
            t = int(t)
            x = market.wealth(self.config.pi, x0=self.config.x0)
            sol = solve_pair(market, fieldu, x.values[tree.levels[t]], t=t)
            tilt = tilted_measure_tree(sol)
            gaps[f"mass_err_t{t}"] = tilt.normalization_error
            dens = tilt.density_process_tree().values
            # martingale consistency after t, exact sums
            worst = 0.0
            for k in range(t, tree.n_periods):
                for n in tree.levels[k]:
                    c = tree.children[n]
                    worst = max(worst, abs(float(np.dot(tree.branch_prob[c], dens[c]))
                                           - dens[n]))
            gaps[f"martingale_err_t{t}"] = worst
            ok = ok and worst <= 1e-10
        return CheckOutcome("tilted-measure", bool(ok), summary=gaps)

    def _check_integrability_probe(self) -> CheckOutcome:
        c_grid = self.config.section("probe").get("c_grid", [0.5, 1.0, 2.0, 4.0])
        if self.config.model_kind == "tree":
            market = self.config.tree_market()
            fieldu = self.config.utility(market)
            x = market.wealth(self.config.pi, x0=self.config.x0)
            sol = solve_pair(market, fieldu, x.values[market.tree.levels[0]], t=0)
            tilt = tilted_measure_tree(sol)
            rep = integrability_probe(market, self.spec, tilt, c_grid)
            ok = rep.largest_stable_c == float(c_grid[-1])
        else:
            bm = self.config.brownian_market()
            cf = self._closed_form()
            w_T = bm.driver().terminal / bm.sigma
            shift = cf.tilted_shift()
            weights = np.exp(shift * w_T - 0.5 * shift ** 2 * cf.horizon)
            weights /= weights.mean()  # finite-sample renormalization
            tilt = TiltedMeasure(weights, tree=None, t=0)
            rep = integrability_probe(bm, self.spec, tilt, c_grid)
            ok = np.isfinite(rep.largest_stable_c) and rep.largest_stable_c > 0
        return CheckOutcome("integrability-probe", bool(ok),
                            summary={"largest_stable_c": rep.largest_stable_c,
                                     "estimates": rep.estimates,
                                     "spreads": rep.spreads})

    # -- convergence -----------------------------------------------------------

    def _check_wealth_decomposition(self) -> CheckOutcome:
        if self.config.model_kind != "bs":
            return self._skip("wealth-decomposition", "needs a Brownian model")
        conv = self.config.section("convergence")
        eps = float(conv.get("eps", 0.05))
        n_levels = int(conv.get("n_levels", 3))
        bm = self.config.brownian_market()
        rep = wealth_decomposition_check(bm, self.spec, self.config.pi,
                                         self.config.x0, eps, n_levels=n_levels)
        for j, (dt, err) in enumerate(zip(rep.dts, rep.mean_errors)):
            order = (np.log2(rep.mean_errors[j - 1] / err) if j > 0 and err > 0
                     else np.nan)
            self._csv_rows["convergence"].append(
                (dt, err, np.log2(err) if err > 0 else np.nan, order))
        return CheckOutcome("wealth-decomposition", rep.passed,
                            summary={"dts": rep.dts, "mean_errors": rep.mean_errors,
                                     "ratios": rep.ratios, "band": rep.ratio_band})

    # -- sensitivity -------------------------------------------------------------

    def _sens_params(self) -> dict:
        s = self.config.section("sensitivity")
        return {
            "t_grid": s.get("t_grid", [0.0, 0.5]),
            "tree_t": s.get("tree_t", [0, 1]),
            "n_outer": int(s.get("n_outer", 400)),
            "n_inner": int(s.get("n_inner", 250)),
            "eps0": float(s.get("eps0", 1e-2)),
            "tree_eps0": float(s.get("tree_eps0", 1e-3)),
            "tree_tol": float(s.get("tree_tol", 1e-4)),
            "continuity_eps": s.get("continuity_eps", [0.04, 0.02, 0.01]),
        }

    def _mc_j_sweep(self, cf: ClosedFormMerton, t: float, eps_list: list,
                    n_outer: int, n_inner: int):
        """Per-prefix J values for every eps, evaluated over fixed chunks of
        prefixes (common random numbers across eps by construction)."""
        if t == 0.0:
            n_outer, n_inner = 1, n_outer * n_inner
        draws = McDraws.generate(self.seed, n_outer, n_inner, t, cf.horizon)

        def eval_rows(a, b):
            sub = McDraws(seed=draws.seed, n_outer=b - a, n_inner=n_inner,
                          t=t, horizon=cf.horizon,
                          z_outer=draws.z_outer[a:b], z_inner=draws.z_inner[a:b])
            return {e: indirect_utility_mc(cf, sub, e) for e in eps_list}

        parts = chunked_map(eval_rows, n_outer, jobs=self.jobs)
        out = {}
        for e in eps_list:
            vals = np.concatenate([p[e].values for p in parts])
            ses = np.concatenate([p[e].se for p in parts])
            out[e] = (vals, ses)
        return draws, out

    @staticmethod
    def _batch_se(x: np.ndarray, n_batches: int = 20) -> float:
        if x.size < n_batches:
            return float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
        batches = np.array_split(x, n_batches)
        means = np.array([b.mean() for b in batches])
        return float(means.std(ddof=1) / np.sqrt(n_batches))

    def _check_sensitivity_formula(self) -> CheckOutcome:
        p = self._sens_params()
        if self.config.model_kind == "tree":
            return self._tree_sensitivity(p)
        cf = self._closed_form()
        eps0 = p["eps0"]
        ladder = [eps0, -eps0, eps0 / 2, -eps0 / 2, eps0 / 4, -eps0 / 4]
        ok = True
        summary = {}
        for t in p["t_grid"]:
            t = float(t)
            draws, sweep = self._mc_j_sweep(cf, t, ladder + [0.0],
                                            p["n_outer"], p["n_inner"])
            j_by_eps = {e: sweep[e][0] for e in ladder}
            fd = finite_difference_derivative(j_by_eps)
            formula = np.atleast_1d(cf.derivative(draws.w_t, t))
            diff = formula - fd.value
            mean_diff = float(diff.mean())
            mean_formula = float(formula.mean())
            if diff.size > 1:
                se = self._batch_se(diff)
            else:
                # single prefix: batch the pathwise difference quotients
                e = ladder[0]
                per_path = (cf.utility(_terminal_paths(cf, draws, e))
                            - cf.utility(_terminal_paths(cf, draws, -e))) / (2 * e)
                se = self._batch_se(per_path.ravel())
            spread = float(np.mean(fd.extrapolation_spread))
            tol = max(0.01 * abs(mean_formula), 3.0 * se + spread)
            ok_t = abs(mean_diff) <= tol
            ok = ok and ok_t
            j0 = float(np.mean(sweep[0.0][0]))
            report = SensitivityReport(
                t=t,
                formula=mean_formula,
                fd_central={e: float(np.mean(c)) for e, c in fd.central.items()},
                fd_extrapolated=float(fd.value.mean()),
                fd_error_bar=3.0 * se + spread,
                continuity_slopes={e: abs(float(np.mean(sweep[e][0])) - j0) / abs(e)
                                   for e in ladder},
                passed=bool(ok_t),
            )
            summary[f"t={t}"] = {**report.__dict__, "abs_diff": abs(mean_diff),
                                 "tol": tol}
            for e in sorted(ladder):
                vals, inner_se = sweep[e]
                row_se = (self._batch_se(vals) if vals.size > 1
                          else float(np.mean(inner_se)))
                self._csv_rows["sensitivity"].append(
                    (t, e, float(np.mean(vals)), row_se))
        return CheckOutcome("sensitivity-formula", bool(ok), summary=summary)

    def _tree_sensitivity(self, p: dict) -> CheckOutcome:
        market = self.config.tree_market()
        fieldu = self.config.utility(market)
        eps0 = p["tree_eps0"]
        ladder = [eps0, -eps0, eps0 / 2, -eps0 / 2, eps0 / 4, -eps0 / 4]
        ok = True
        summary = {}
        for t in p["tree_t"]:
            t = int(t)
            j_by_eps = {}
            for e in ladder + [0.0]:
                j_by_eps[e] = indirect_utility_tree(
                    market, fieldu, self.spec, self.config.pi, self.config.x0,
                    t, e).values
            fd = finite_difference_derivative(
                {e: v for e, v in j_by_eps.items() if e != 0.0})
            formula = derivative_formula_tree(market, fieldu, self.spec,
                                              self.config.pi, self.config.x0, t)
            gap = float(np.max(np.abs(fd.value - formula)))
            ok_t = gap <= p["tree_tol"]
            ok = ok and ok_t
            tt = float(market.tree.times.times[t])
            report = SensitivityReport(
                t=tt,
                formula=float(np.mean(formula)),
                fd_central={e: float(np.mean(c)) for e, c in fd.central.items()},
                fd_extrapolated=float(np.mean(fd.value)),
                fd_error_bar=float(np.max(fd.extrapolation_spread)),
                continuity_slopes={
                    e: float(np.mean(np.abs(j_by_eps[e] - j_by_eps[0.0]))) / abs(e)
                    for e in ladder},
                passed=bool(ok_t),
            )
            summary[f"t_index={t}"] = {**report.__dict__, "max_gap": gap,
                                       "tol": p["tree_tol"]}
            for e in sorted(ladder):
                self._csv_rows["sensitivity"].append(
                    (tt, e, float(np.mean(j_by_eps[e])), 0.0))
        return CheckOutcome("sensitivity-formula", bool(ok), summary=summary)

    def _check_continuity(self) -> CheckOutcome:
        p = self._sens_params()
        sweep_eps = [0.0] + [s * e for e in p["continuity_eps"] for s in (1, -1)]
        ok = True
        summary = {}
        if self.config.model_kind == "tree":
            market = self.config.tree_market()
            fieldu = self.config.utility(market)
            for t in p["tree_t"]:
                t = int(t)
                j_by_eps = {e: indirect_utility_tree(
                    market, fieldu, self.spec, self.config.pi, self.config.x0,
                    t, e).values for e in sweep_eps}
                rep = continuity_check(j_by_eps)
                residual = max(0.0, rep.details["max_ratio_deviation"] - 0.25)
                ok = ok and residual <= 1e-8
                summary[f"t_index={t}"] = {"ratios": rep.ratios,
                                           "band_residual": residual}
                tt = float(market.tree.times.times[t])
                for e in sorted(sweep_eps):
                    j0 = j_by_eps[0.0]
                    slope = (float(np.mean(np.abs(j_by_eps[e] - j0))) / abs(e)
                             if e != 0 else 0.0)
                    self._csv_rows["continuity"].append(
                        (tt, e, float(np.mean(j_by_eps[e])), 0.0, slope))
        else:
            cf = self._closed_form()
            for t in p["t_grid"]:
                t = float(t)
                draws, sweep = self._mc_j_sweep(cf, t, sweep_eps,
                                                p["n_outer"], p["n_inner"])
                means = {e: float(np.mean(sweep[e][0])) for e in sweep_eps}
                rep = continuity_check({e: np.atleast_1d(v) for e, v in means.items()})
                ok = ok and rep.passed
                summary[f"t={t}"] = {"ratios": rep.ratios, "passed": rep.passed}
                for e in sorted(sweep_eps):
                    vals = sweep[e][0]
                    se = (self._batch_se(vals) if vals.size > 1
                          else float(np.mean(sweep[e][1])))
                    slope = abs(means[e] - means[0.0]) / abs(e) if e != 0 else 0.0
                    self._csv_rows["continuity"].append((t, e, means[e], se, slope))
        return CheckOutcome("continuity", bool(ok), summary=summary)


def _terminal_paths(cf: ClosedFormMerton, draws: McDraws, eps: float) -> np.ndarray:
    """Terminal wealth panel of the eps-optimal continuation (for pathwise
    difference-quotient standard errors)."""
    tau = draws.horizon - draws.t
    x_t = cf.wealth_at(draws.w_t, draws.t, eps)
    pi_star = cf.merton_fraction(eps)
    s, m = cf.sigma_eps(eps), cf.mu_eps(eps)
    drift = (pi_star * m - 0.5 * pi_star ** 2 * s ** 2) * tau
    return x_t[:, None] * np.exp(drift + pi_star * s * draws.dw)
