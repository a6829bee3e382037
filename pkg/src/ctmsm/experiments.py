"""Simulation studies: effect curves, mean-weight bias, bandwidth bias-variance, censoring weights.

Every study is deterministic given its seed.  Replication ``r`` uses the
seed ``rep_seed(seed, r)``; within a replication, samples of different
size share subject streams (a smaller sample is a prefix of a larger one).
Set ``CTMSM_WORKERS`` to run replications in a process pool.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .aalen import fit_additive, nelson_aalen
from .core import DesignSpec
from .iptw import StabilizedIPTW
from .sim import (
    BaselineScenario,
    ConfoundedScenario,
    censoring_intensities,
    marginal_treatment_hazard,
    scenario_to_dict,
    simulate_baseline_scenario,
    simulate_confounded,
    simulate_hypothetical,
    simulate_randomized_censoring,
    treatment_intensities,
)
from .transform import bind, relative_survival_spec, solve_plugin
from .validation import check_bandwidth_sequence
from .weights import censoring_weights, default_bandwidth, estimate_weights, theoretical_weights

GRID_POINTS = 200
OUTCOME_DESIGN = ("1", "A")


def rep_seed(seed: int, rep: int) -> int:
    """Seed of replication ``rep``; ``rep = -1`` is reserved for oracles."""
    return int(np.random.SeedSequence([int(seed), int(rep) + 1]).generate_state(1, np.uint32)[0])


def time_grid(horizon: float, points: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, horizon, points)


def sup_distance(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CTMSM_WORKERS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    items = list(items)
    workers = _workers()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def effect_curve(coef, grid) -> np.ndarray:
    """``B^{A=1} - B^{A=0}``, i.e. the cumulative ``A`` coefficient, on ``grid``."""
    return coef.column("A")(grid)


def treatment_weight_set(history, kappa=None, truncation=None):
    fact = fit_additive(history, "A", DesignSpec(["1", "L"]))
    hyp = nelson_aalen(history, "A")
    kappa = default_bandwidth(history) if kappa is None else kappa
    return estimate_weights(history, fact, hyp, DesignSpec(["1", "L"]), DesignSpec(["1"]), kappa, truncation=truncation)


# ---------------------------------------------------------------- manifest


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def manifest(name: str, config: dict, seeds: dict) -> dict:
    import scipy
    import sklearn

    from . import __version__

    return {
        "experiment": name,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "versions": {
            "ctmsm": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "scikit-learn": sklearn.__version__,
        },
    }


@dataclass
class ExperimentResult:
    name: str
    tables: dict
    manifest: dict
    summary: dict = field(default_factory=dict)

    def write(self, outdir) -> Path:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        for key, df in self.tables.items():
            df.to_csv(out / f"{key}.csv", index=False, float_format="%.17g")
        with open(out / "manifest.json", "w") as fh:
            json.dump({**self.manifest, "summary": self.summary}, fh, indent=2, default=float)
        return out


# ---------------------------------------------------------- effect curves


def _effect_rep(args):
    scn, n_list, K_list, seed, grid, kappa = args
    rows, dist = [], []
    for n in n_list:
        h = simulate_confounded(scn.with_(n=n), seed)
        lam, lam_t = treatment_intensities(scn)
        curves = {"unweighted": effect_curve(fit_additive(h, "D", OUTCOME_DESIGN), grid)}
        for K in K_list:
            w = StabilizedIPTW(K).fit_transform(h)
            curves[f"iptw_K{K}"] = effect_curve(fit_additive(h, "D", OUTCOME_DESIGN, w), grid)
        w_ct = treatment_weight_set(h, kappa)
        coef_ct = fit_additive(h, "D", OUTCOME_DESIGN, w_ct)
        curves["ct"] = effect_curve(coef_ct, grid)
        coef_th = fit_additive(h, "D", OUTCOME_DESIGN, theoretical_weights(h, lam, lam_t))
        curves["theoretical"] = effect_curve(coef_th, grid)
        for method, c in curves.items():
            rows.append(pd.DataFrame({"n": n, "method": method, "time": grid, "value": c}))
        dist.append({"n": n, **{m: c for m, c in curves.items()}})
    return rows, dist, coef_ct, coef_th


def run_effect_comparison(
    scenario: ConfoundedScenario | None = None,
    ns=(500, 1000, 2000),
    K_list=(4, 8, 16),
    reps: int = 50,
    seed: int = 1,
    oracle_n: int = 20000,
    kappa=None,
    grid_points: int = GRID_POINTS,
) -> ExperimentResult:
    """Cumulative treatment effect under each weighting method, against the hypothetical-world oracle.

    The oracle is the unweighted ``(1, A)`` outcome fit on a large sample
    simulated with treatment started at the marginal hazard.  Distances are
    sup-norms over an equispaced grid, both to the oracle and to the
    theoretical-weight curve of the same replication.
    """
    scn = scenario or ConfoundedScenario()
    grid = time_grid(scn.horizon, grid_points)
    marg = marginal_treatment_hazard(scn)
    oracle_h = simulate_hypothetical(scn.with_(n=oracle_n), marg, rep_seed(seed, -1))
    oracle = effect_curve(fit_additive(oracle_h, "D", OUTCOME_DESIGN), grid)

    seeds = [rep_seed(seed, r) for r in range(reps)]
    results = _map(_effect_rep, [(scn, tuple(ns), tuple(K_list), s, grid, kappa) for s in seeds])

    curves, dists = [pd.DataFrame({"n": 0, "method": "oracle", "time": grid, "value": oracle, "rep": -1})], []
    for r, (rows, dist, _, _) in enumerate(results):
        curves.extend(df.assign(rep=r) for df in rows)
        for d in dist:
            th = d["theoretical"]
            for m, c in d.items():
                if m == "n":
                    continue
                dists.append({"rep": r, "n": d["n"], "method": m, "sup_to_oracle": sup_distance(c, oracle), "sup_to_theoretical": sup_distance(c, th)})
    distances = pd.DataFrame(dists)

    # relative survival of treatment at 0 versus never, first replication, largest n
    _, _, coef_ct, coef_th = results[0]
    rs_rows = []
    for method, coef in (("ct", coef_ct), ("theoretical", coef_th)):
        path = solve_plugin(relative_survival_spec(), bind(relative_survival_spec(), coef, [[1, 1], [1, 0]]))
        rs_rows.append(pd.DataFrame({"method": method, "time": grid, "value": path(grid)[:, 0]}))

    summary = (
        distances.groupby(["n", "method"])[["sup_to_oracle", "sup_to_theoretical"]].median().reset_index().to_dict(orient="records")
    )
    config = {"scenario": scenario_to_dict(scn), "ns": list(ns), "K_list": list(K_list), "reps": reps, "seed": seed, "oracle_n": oracle_n, "kappa": kappa, "grid_points": grid_points}
    return ExperimentResult(
        "fig1",
        {"curves": pd.concat(curves, ignore_index=True), "distances": distances, "relative_survival": pd.concat(rs_rows, ignore_index=True)},
        manifest("fig1", config, {"base": seed, "oracle": rep_seed(seed, -1), "replications": seeds}),
        {"median_distances": summary},
    )


# ------------------------------------------------------- mean-weight bias


def _mean_weight_rep(args):
    scn, K_list, seed, grid, kappa = args
    h = simulate_confounded(scn, seed)
    lam, lam_t = treatment_intensities(scn)
    out = {"theoretical": theoretical_weights(h, lam, lam_t).mean_curve(grid), "ct": treatment_weight_set(h, kappa).mean_curve(grid)}
    for K in K_list:
        out[f"iptw_K{K}"] = StabilizedIPTW(K).fit_transform(h).mean_curve(grid)
    return out


def run_mean_weight_bias(
    scenario: ConfoundedScenario | None = None,
    n: int = 3000,
    reps: int = 50,
    K_list=(4, 8, 16),
    seed: int = 1,
    kappa=None,
    grid_points: int = GRID_POINTS,
) -> ExperimentResult:
    """Mean weight over subjects and replications, per method and grid time.

    The ``se`` column is the standard error of the replication average.
    """
    scn = (scenario or ConfoundedScenario()).with_(n=n)
    grid = time_grid(scn.horizon, grid_points)
    seeds = [rep_seed(seed, r) for r in range(reps)]
    per_rep = _map(_mean_weight_rep, [(scn, tuple(K_list), s, grid, kappa) for s in seeds])
    rows = []
    for method in per_rep[0]:
        m = np.array([d[method] for d in per_rep])
        se = m.std(axis=0, ddof=1) / np.sqrt(reps) if reps > 1 else np.full(len(grid), np.nan)
        rows.append(pd.DataFrame({"method": method, "time": grid, "mean": m.mean(axis=0), "se": se}))
    table = pd.concat(rows, ignore_index=True)
    config = {"scenario": scenario_to_dict(scn), "n": n, "reps": reps, "K_list": list(K_list), "seed": seed, "kappa": kappa, "grid_points": grid_points}
    return ExperimentResult("fig2", {"mean_weights": table}, manifest("fig2", config, {"base": seed, "replications": seeds}))


# -------------------------------------------------------- bias / variance


RATES = {"k1": 1 / 2, "k2": 1 / 3, "k3": 1 / 5, "k4": 1 / 10}


@dataclass
class StrategyGrid:
    """Bandwidth strategies ``kappa_n = (n / n0)^rate / t0``, equal at ``n0``."""

    ns: tuple = (50, 100, 200, 400, 800, 1600)
    t0: float = 2.0
    reps: int = 200
    rates: dict = field(default_factory=lambda: dict(RATES))

    def __post_init__(self):
        self.ns = tuple(sorted(int(n) for n in self.ns))
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")

    @property
    def n0(self) -> int:
        return self.ns[0]

    def kappa(self, strategy: str, n: int) -> float:
        return (n / self.n0) ** self.rates[strategy] / self.t0


def _bias_variance_rep(args):
    scn, grid, seed = args
    out = {}
    for n in grid.ns:
        h = simulate_baseline_scenario(scn.with_(n=n), seed)
        fact = fit_additive(h, "A", DesignSpec(["1", "x"]))
        hyp = nelson_aalen(h, "A")
        for z in grid.rates:
            w = estimate_weights(h, fact, hyp, DesignSpec(["1", "x"]), DesignSpec(["1"]), grid.kappa(z, n))
            v = w.evaluate([grid.t0])[:, 0]
            out[(z, n)] = (float(v.sum()), float(np.sum(v * v)), len(v))
    return out


def run_bias_variance(grid: StrategyGrid | None = None, scenario: BaselineScenario | None = None, seed: int = 1) -> ExperimentResult:
    """Bias and variance of the estimated weight at ``t0`` per strategy and ``n``.

    The true weights have mean 1, so ``bias`` is the average of
    ``R^(i,n)_{t0}`` over subjects and replications minus 1, and
    ``variance`` is the pooled variance of ``R^(i,n)_{t0}``.  The variance
    of the per-replication subject average is reported as
    ``variance_of_mean``.  Data beyond ``t0`` never affect the weights at
    ``t0``, so the scenario horizon is cut to ``t0``.
    """
    grid = grid or StrategyGrid()
    scn = (scenario or BaselineScenario()).with_(horizon=grid.t0)
    for z in grid.rates:
        check_bandwidth_sequence(grid.ns, [grid.kappa(z, n) for n in grid.ns])
    seeds = [rep_seed(seed, r) for r in range(grid.reps)]
    per_rep = _map(_bias_variance_rep, [(scn, grid, s) for s in seeds])
    rows = []
    for z in grid.rates:
        for n in grid.ns:
            stats = np.array([d[(z, n)] for d in per_rep])
            total, total_sq, count = stats[:, 0].sum(), stats[:, 1].sum(), stats[:, 2].sum()
            mean = total / count
            rep_means = stats[:, 0] / stats[:, 2]
            rows.append(
                {
                    "strategy": z,
                    "rate": grid.rates[z],
                    "n": n,
                    "kappa": grid.kappa(z, n),
                    "bias": mean - 1.0,
                    "variance": (total_sq - count * mean**2) / (count - 1),
                    "variance_of_mean": rep_means.var(ddof=1) if len(rep_means) > 1 else np.nan,
                }
            )
    config = {"scenario": scenario_to_dict(scn), "ns": list(grid.ns), "t0": grid.t0, "reps": grid.reps, "rates": grid.rates, "seed": seed}
    return ExperimentResult("fig3", {"bias_variance": pd.DataFrame(rows)}, manifest("fig3", config, {"base": seed, "replications": seeds}))


# ------------------------------------------------------ censoring weights


def censoring_scenario(**overrides) -> ConfoundedScenario:
    """Untreated population whose censoring and outcome hazards both rise with ``L``."""
    base = dict(alpha_A0=0.0, alpha_AL=0.0, alpha_D0=0.05, alpha_DL=0.25, alpha_L0=0.2, alpha_C0=0.05, alpha_CL=0.4)
    return ConfoundedScenario(**{**base, **overrides})


def _censoring_rep(args):
    scn, seed, grid = args
    h = simulate_confounded(scn, seed)
    fact = fit_additive(h, "C", DesignSpec(["1", "L"]))
    hyp = nelson_aalen(h, "C")
    w = censoring_weights(h, fact, hyp, DesignSpec(["1", "L"]), DesignSpec(["1"]))
    lam, lam_t = censoring_intensities(scn)
    return {
        "unweighted": nelson_aalen(h, "D")(grid)[:, 0],
        "weighted": nelson_aalen(h, "D", w)(grid)[:, 0],
        "mean_weight": w.mean_curve(grid),
        # the jump factor at censoring makes the exact ratio a mean-one martingale
        "mean_theoretical_weight": theoretical_weights(h, lam, lam_t, process="C", include_jump=True).mean_curve(grid),
    }


def run_censoring_validation(
    scenario: ConfoundedScenario | None = None,
    n: int = 2000,
    reps: int = 50,
    seed: int = 1,
    oracle_n: int = 20000,
    grid_points: int = GRID_POINTS,
) -> ExperimentResult:
    """Cumulative outcome hazard with and without censoring weights.

    The oracle is the Nelson-Aalen outcome estimate on a large sample whose
    censoring follows the marginal censoring hazard, independent of ``L``.
    """
    scn = (scenario or censoring_scenario()).with_(n=n)
    grid = time_grid(scn.horizon, grid_points)
    oracle_h = simulate_randomized_censoring(scn.with_(n=oracle_n), rep_seed(seed, -1))
    oracle = nelson_aalen(oracle_h, "D")(grid)[:, 0]
    seeds = [rep_seed(seed, r) for r in range(reps)]
    per_rep = _map(_censoring_rep, [(scn, s, grid) for s in seeds])
    curves = [pd.DataFrame({"rep": -1, "method": "oracle", "time": grid, "value": oracle})]
    dist = []
    for r, d in enumerate(per_rep):
        for m in ("unweighted", "weighted"):
            curves.append(pd.DataFrame({"rep": r, "method": m, "time": grid, "value": d[m]}))
        dist.append({"rep": r, "sup_unweighted": sup_distance(d["unweighted"], oracle), "sup_weighted": sup_distance(d["weighted"], oracle)})
    mw = np.array([d["mean_weight"] for d in per_rep])
    mt = np.array([d["mean_theoretical_weight"] for d in per_rep])
    se = lambda m: m.std(axis=0, ddof=1) / np.sqrt(len(m)) if len(m) > 1 else np.full(m.shape[1], np.nan)  # noqa: E731
    weights = pd.concat(
        [
            pd.DataFrame({"method": "estimated", "time": grid, "mean": mw.mean(axis=0), "se": se(mw)}),
            pd.DataFrame({"method": "theoretical", "time": grid, "mean": mt.mean(axis=0), "se": se(mt)}),
        ],
        ignore_index=True,
    )
    distances = pd.DataFrame(dist)
    config = {"scenario": scenario_to_dict(scn), "n": n, "reps": reps, "seed": seed, "oracle_n": oracle_n, "grid_points": grid_points}
    summary = {"fraction_weighted_closer": float(np.mean(distances["sup_weighted"] < distances["sup_unweighted"]))}
    return ExperimentResult(
        "censoring",
        {"curves": pd.concat(curves, ignore_index=True), "distances": distances, "mean_weights": weights},
        manifest("censoring", config, {"base": seed, "oracle": rep_seed(seed, -1), "replications": seeds}),
        summary,
    )


# --------------------------------------------------- weight convergence


def _convergence_rep(args):
    scn, ns, seed, quantile = args
    lam, lam_t = treatment_intensities(scn)
    base = simulate_baseline_scenario(scn.with_(n=ns[0]), seed)
    kappa0 = default_bandwidth(base, quantile=quantile)
    out = {}
    for n in ns:
        h = simulate_baseline_scenario(scn.with_(n=n), seed)
        fact = fit_additive(h, "A", DesignSpec(["1", "x"]))
        w = estimate_weights(h, fact, nelson_aalen(h, "A"), DesignSpec(["1", "x"]), DesignSpec(["1"]), kappa0 * (n / ns[0]) ** (1 / 3))
        truth = theoretical_weights(h, lam, lam_t)
        # both paths are constant between these points, so checking values and left limits gives the sup
        g = np.union1d(time_grid(scn.horizon), w.export_grid())
        err = np.maximum(
            np.abs(w.evaluate(g) - truth.evaluate(g)).max(axis=1),
            np.abs(w.evaluate(g, left=True) - truth.evaluate(g, left=True)).max(axis=1),
        )
        out[n] = float(np.median(err[: ns[0]]))
    return out


def run_weight_convergence(scenario: BaselineScenario | None = None, ns=(250, 500, 1000, 2000), reps: int = 20, seed: int = 1, quantile: float = 0.1) -> ExperimentResult:
    """Distance between estimated and true weights as ``n`` grows with ``kappa_n ~ n^{1/3}``.

    For each replication, the error is the median over the ``min(ns)``
    subjects shared by all sample sizes of ``sup_t |R^(i,n)_t - R^i_t|``.
    The bandwidth is anchored at the smallest sample by
    :func:`default_bandwidth`.
    """
    scn = scenario or BaselineScenario()
    ns = tuple(sorted(int(n) for n in ns))
    seeds = [rep_seed(seed, r) for r in range(reps)]
    per_rep = _map(_convergence_rep, [(scn, ns, s, quantile) for s in seeds])
    table = pd.DataFrame([{"rep": r, "n": n, "median_sup_error": d[n]} for r, d in enumerate(per_rep) for n in ns])
    summary = table.groupby("n")["median_sup_error"].mean().to_dict()
    config = {"scenario": scenario_to_dict(scn), "ns": list(ns), "reps": reps, "seed": seed, "quantile": quantile}
    return ExperimentResult("convergence", {"convergence": table}, manifest("convergence", config, {"base": seed, "replications": seeds}), {"mean_error": summary})


EXPERIMENTS = {
    "fig1": run_effect_comparison,
    "fig2": run_mean_weight_bias,
    "fig3": run_bias_variance,
    "censoring": run_censoring_validation,
    "convergence": run_weight_convergence,
}
