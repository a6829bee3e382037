"""Command-line interface.

Every subcommand takes ``--config FILE`` (JSON) and flags that override the
keys of that file one to one; ``--out`` names the output directory.  Exit
codes: 0 on success, 1 on user errors (bad config, missing files, invalid
designs), 2 on internal errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import experiments as exps
from .aalen import CumCoef, fit_additive
from .core import DesignSpec, expand_to_event_grid, read_history_csv, write_history_csv
from .iptw import StabilizedIPTW
from .sim import (
    BaselineScenario,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
    simulate_baseline_scenario,
    simulate_confounded,
    treatment_intensities,
)
from .transform import bind, get_spec, solve_plugin
from .weights import ContinuousTimeWeights, read_weights_csv, theoretical_weights

log = logging.getLogger("ctmsm")

EVENTS = "events.csv"
BASELINE = "baseline.csv"
META = "meta.json"
DIAG_POINTS = 200


class UserError(Exception):
    """Problems with the user's input; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


# ------------------------------------------------------------------ config


def _load_config(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UserError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                cfg.update(json.load(fh))
        except json.JSONDecodeError as e:
            raise UserError(f"config file {path} is not valid JSON: {e}") from None
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _json_list(text):
    try:
        val = json.loads(text)
    except json.JSONDecodeError:
        val = [s.strip() for s in text.split(",") if s.strip()]
    return val


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UserError(f"missing required setting(s): {', '.join(missing)}")


def _out_dir(cfg) -> Path:
    _require(cfg, "out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_history(cfg):
    _require(cfg, "events")
    events = Path(cfg["events"])
    if not events.is_file():
        raise UserError(f"event file not found: {events}")
    baseline = cfg.get("baseline")
    if baseline is None and (events.parent / BASELINE).is_file():
        baseline = events.parent / BASELINE
    horizon = cfg.get("horizon")
    if horizon is None and (events.parent / META).is_file():
        with open(events.parent / META) as fh:
            horizon = json.load(fh).get("horizon")
    if horizon is None:
        raise UserError("no horizon given and no meta.json next to the event file")
    if baseline is not None and not Path(baseline).is_file():
        raise UserError(f"baseline file not found: {baseline}")
    return read_history_csv(events, baseline, float(horizon))


def _scenario(cfg):
    scn = cfg.get("scenario")
    if scn is None:
        raise UserError("this command needs a scenario (path or object)")
    if isinstance(scn, (str, Path)):
        if not Path(scn).is_file():
            raise UserError(f"scenario file not found: {scn}")
        return load_scenario(scn)
    return scenario_from_dict(scn)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=float)


def _diag_grid(history):
    return np.linspace(0.0, history.horizon, DIAG_POINTS)


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg) -> Path:
    scn = _scenario(cfg)
    if cfg.get("n") is not None:
        scn = scn.with_(n=int(cfg["n"]))
    out = _out_dir(cfg)
    seed = int(cfg["seed"])
    h = simulate_baseline_scenario(scn, seed) if isinstance(scn, BaselineScenario) else simulate_confounded(scn, seed)
    write_history_csv(h, out / EVENTS, out / BASELINE)
    _write_json(out / META, {"horizon": h.horizon, "n": h.n, "seed": seed, "scenario": scenario_to_dict(scn)})
    return out


def _weight_set(cfg, history):
    method = cfg.get("weights", "none")
    if method == "none":
        return None
    if method == "ct":
        est = ContinuousTimeWeights(cfg["factual_design"], cfg["hypothetical_design"], cfg.get("kappa"), cfg.get("theta0", "window"), cfg.get("truncation"))
        return est.fit_transform(history)
    if method == "iptw":
        return StabilizedIPTW(int(cfg["K"]), tuple(cfg.get("covariates", ("L",)))).fit_transform(history)
    if method == "theoretical":
        lam, lam_t = treatment_intensities(_scenario(cfg))
        return theoretical_weights(history, lam, lam_t)
    if method == "file":
        _require(cfg, "weights_file")
        return read_weights_csv(cfg["weights_file"])
    raise UserError(f"unknown weight method {method!r}; choose none, ct, iptw, theoretical or file")


def cmd_weights(cfg) -> Path:
    history = _load_history(cfg)
    out = _out_dir(cfg)
    w = _weight_set({**cfg, "weights": cfg.get("method", "ct")}, history)
    w.to_csv(out / "weights.csv")
    expand_to_event_grid(history, cfg["outcome"], w, DesignSpec(cfg["design"])).to_csv(out / "expanded.csv", index=False, float_format="%.17g")
    _write_json(out / "diagnostics.json", w.diagnostics(_diag_grid(history)))
    return out


def cmd_iptw(cfg) -> Path:
    history = _load_history(cfg)
    out = _out_dir(cfg)
    est = StabilizedIPTW(int(cfg["K"]), tuple(cfg["covariates"]))
    w = est.fit_transform(history)
    w.to_csv(out / "weights.csv")
    diag = w.diagnostics(_diag_grid(history))
    for name, fit in (("numerator", est.numerator_), ("denominator", est.denominator_)):
        diag[name] = {
            "columns": list(fit.columns),
            "coef": [float(c) for c in fit.coef],
            "converged": fit.converged,
            "n_iter": fit.n_iter,
            "loglik": fit.loglik,
            "dropped": list(fit.dropped),
            "separated": fit.separated,
        }
    _write_json(out / "diagnostics.json", diag)
    return out


def cmd_fit(cfg) -> Path:
    history = _load_history(cfg)
    out = _out_dir(cfg)
    w = _weight_set(cfg, history)
    coef = fit_additive(history, cfg["outcome"], DesignSpec(cfg["design"]), w, cfg.get("singular", "pinv"))
    coef.write(out / "cumcoef.csv", out / "cumcoef.json")
    return out


def cmd_transform(cfg) -> Path:
    _require(cfg, "cumcoef", "spec")
    path = Path(cfg["cumcoef"])
    if not path.is_file():
        raise UserError(f"coefficient file not found: {path}")
    meta = path.with_suffix(".json")
    coef = CumCoef.read(path, meta if meta.is_file() else None)
    try:
        spec = get_spec(cfg["spec"], horizon=cfg.get("horizon"))
    except KeyError as e:
        raise UserError(str(e.args[0])) from None
    combos = cfg.get("combos")
    if combos is None:
        combos = np.eye(spec.n_hazards, coef.p)
    out = _out_dir(cfg)
    solve_plugin(spec, bind(spec, coef, combos), cfg.get("horizon")).to_csv(out / "param.csv")
    return out


def cmd_experiment(cfg) -> Path:
    name = cfg["name"]
    out = _out_dir(cfg)
    params = dict(cfg.get("params") or {})
    if cfg.get("seed") is not None:
        params["seed"] = int(cfg["seed"])
    if "scenario" in params and isinstance(params["scenario"], dict):
        params["scenario"] = scenario_from_dict(params["scenario"])
    if name == "fig3" and "grid" in params:
        params["grid"] = exps.StrategyGrid(**params["grid"])
    fn = exps.EXPERIMENTS[name]
    try:
        result = fn(**params)
    except TypeError as e:
        raise UserError(f"bad parameters for experiment {name}: {e}") from None
    result.write(out)
    return out


# ----------------------------------------------------------------- parsing


COMMON_HISTORY = {"events": None, "baseline": None, "horizon": None, "out": None}

DEFAULTS = {
    "simulate": {"scenario": None, "seed": 1, "n": None, "out": None},
    "weights": {
        **COMMON_HISTORY,
        "method": "ct",
        "factual_design": ["1", "L"],
        "hypothetical_design": ["1"],
        "kappa": None,
        "theta0": "window",
        "truncation": None,
        "K": 8,
        "covariates": ["L"],
        "scenario": None,
        "outcome": "D",
        "design": ["1", "A"],
    },
    "iptw": {**COMMON_HISTORY, "K": 8, "covariates": ["L"]},
    "fit": {
        **COMMON_HISTORY,
        "outcome": "D",
        "design": ["1", "A"],
        "weights": "none",
        "weights_file": None,
        "factual_design": ["1", "L"],
        "hypothetical_design": ["1"],
        "kappa": None,
        "theta0": "window",
        "truncation": None,
        "K": 8,
        "covariates": ["L"],
        "scenario": None,
        "singular": "pinv",
    },
    "transform": {"cumcoef": None, "spec": None, "combos": None, "horizon": None, "out": None},
    "experiment": {"name": None, "seed": None, "params": None, "out": None},
}

COMMANDS = {
    "simulate": cmd_simulate,
    "weights": cmd_weights,
    "iptw": cmd_iptw,
    "fit": cmd_fit,
    "transform": cmd_transform,
    "experiment": cmd_experiment,
}

HELP = {
    "simulate": "simulate a scenario and write events.csv, baseline.csv, meta.json",
    "weights": "estimate treatment weights and write weights.csv, expanded.csv, diagnostics.json",
    "iptw": "discrete-time stabilized IPTW weights",
    "fit": "(weighted) additive hazard fit, written as cumcoef.csv and cumcoef.json",
    "transform": "plugin transform of cumulative coefficients into param.csv",
    "experiment": "run a simulation study and write its tables and manifest",
}

_TYPES = {
    "seed": int,
    "n": int,
    "K": int,
    "horizon": float,
    "kappa": float,
    "truncation": float,
    "factual_design": _json_list,
    "hypothetical_design": _json_list,
    "design": _json_list,
    "covariates": _json_list,
    "combos": json.loads,
    "params": json.loads,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctmsm", description="Continuous-time marginal structural models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON file with settings; flags override its keys")
        for key in defaults:
            if name == "experiment" and key == "name":
                p.add_argument("name", choices=sorted(exps.EXPERIMENTS))
                continue
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=_TYPES.get(key, str), default=None)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = _load_config(args, DEFAULTS[args.command])
        if args.command == "experiment":
            cfg["name"] = args.name
        out = COMMANDS[args.command](cfg)
        log.info("wrote %s", out)
        return 0
    except UserError as e:
        print(f"ctmsm: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"ctmsm: error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
