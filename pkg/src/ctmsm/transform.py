"""Plugin estimation of parameters that solve ODEs driven by cumulative hazards.

A parameter ``eta`` with ``eta_t = eta_0 + int_0^t F(eta_{s-}) dB_s`` is
estimated by the finite recursion ``eta <- eta + F(eta_-) dB`` over the jump
times of the estimated integrators.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .aalen import CumCoef
from .core import StepPath, fmt

TIME = "time"


@dataclass(frozen=True)
class OdeSpec:
    """Initial value and integrand map of a plugin-estimable parameter.

    ``F`` maps a state of length ``d`` to a ``(d, m)`` matrix.  Integrator
    columns listed in ``time_columns`` are bound to elapsed time rather than
    to a cumulative hazard.
    """

    name: str
    eta0: tuple[float, ...]
    F: Callable[[np.ndarray], np.ndarray]
    m: int
    time_columns: tuple[int, ...] = ()
    lipschitz: float = 1.0
    labels: tuple[str, ...] = ()

    @property
    def d(self) -> int:
        return len(self.eta0)

    @property
    def n_hazards(self) -> int:
        return self.m - len(self.time_columns)


@dataclass
class ParamPath:
    """Piecewise-constant state path; the state at time 0 is ``eta0``."""

    times: np.ndarray
    states: np.ndarray
    eta0: np.ndarray
    labels: tuple[str, ...] = ()

    def path(self) -> StepPath:
        return StepPath(self.times, self.states, self.eta0)

    def __call__(self, t):
        return self.path()(t)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            d = len(self.eta0)
            w.writerow(["time", *(f"state_{j + 1}" for j in range(d))])
            w.writerow([fmt(0.0), *map(fmt, self.eta0)])
            for t, s in zip(self.times, self.states):
                if t == 0.0:
                    continue
                w.writerow([fmt(t), *map(fmt, s)])


def _as_step(x) -> StepPath:
    if isinstance(x, StepPath):
        return x
    if isinstance(x, CumCoef):
        if x.p != 1:
            raise ValueError("bind a single CumCoef column, e.g. coef.column(0)")
        return x.column(0)
    raise TypeError(f"cannot use {type(x).__name__} as an integrator")


def solve_plugin(spec: OdeSpec, integrators: Sequence, horizon: float | None = None) -> ParamPath:
    """Run the plugin recursion.

    Parameters
    ----------
    spec : OdeSpec
    integrators : sequence of StepPath
        One cumulative path per hazard column of ``spec``, in column order;
        time columns are filled in automatically.
    horizon : float, optional
        Last time point.  Needed when the spec has time columns; hazard jumps
        beyond it are ignored.

    Returns
    -------
    ParamPath
        States at the union of integrator jump times (plus ``horizon``).
        Jumps shared by several columns enter as one joint increment.
    """
    integrators = [_as_step(x) for x in integrators]
    if len(integrators) != spec.n_hazards:
        raise ValueError(f"spec {spec.name!r} needs {spec.n_hazards} hazard integrators, got {len(integrators)}")
    if spec.time_columns and horizon is None:
        raise ValueError(f"spec {spec.name!r} integrates over time and needs a horizon")

    grid = np.unique(np.concatenate([p.jump_times for p in integrators] or [np.empty(0)]))
    if horizon is not None:
        grid = np.union1d(grid[grid <= horizon], [horizon] if spec.time_columns else [])
    hazard_cols = [j for j in range(spec.m) if j not in spec.time_columns]
    dB = np.zeros((len(grid), spec.m))
    for j, p in zip(hazard_cols, integrators):
        keep = p.jump_times <= grid[-1] if len(grid) else np.zeros(0, bool)
        dB[np.searchsorted(grid, p.jump_times[keep]), j] = p.jumps[keep]
    if spec.time_columns:
        dt = np.diff(np.concatenate([[0.0], grid]))
        for j in spec.time_columns:
            dB[:, j] = dt

    eta = np.asarray(spec.eta0, dtype=float).copy()
    states = np.empty((len(grid), spec.d))
    for k in range(len(grid)):
        eta = eta + np.asarray(spec.F(eta), dtype=float).reshape(spec.d, spec.m) @ dB[k]
        if not np.all(np.isfinite(eta)):
            raise FloatingPointError(f"non-finite state at t={grid[k]} in spec {spec.name!r}")
        states[k] = eta
    return ParamPath(grid, states, np.asarray(spec.eta0, dtype=float), spec.labels)


def identity_spec(d: int) -> OdeSpec:
    """``F = I``: the solution reproduces its integrators."""
    return OdeSpec("identity", (0.0,) * d, lambda eta: np.eye(d), d, labels=tuple(f"B{j + 1}" for j in range(d)))


def survival_spec() -> OdeSpec:
    """``S_t = 1 - int_0^t S_{s-} dB_s``."""
    return OdeSpec("survival", (1.0,), lambda eta: np.array([[-eta[0]]]), 1, labels=("S",))


def relative_survival_spec() -> OdeSpec:
    """``RS_t = 1 + int (-RS, RS) d(B^{A=a}, B^{A=0})``."""
    return OdeSpec("relative_survival", (1.0,), lambda eta: np.array([[-eta[0], eta[0]]]), 2, labels=("RS",))


def cumulative_incidence_spec() -> OdeSpec:
    """State ``(S, C1)`` driven by (cause-1 hazard, all-cause hazard)."""

    def F(eta):
        S = eta[0]
        return np.array([[0.0, -S], [S, 0.0]])

    return OdeSpec("cumulative_incidence", (1.0, 0.0), F, 2, labels=("S", "C1"))


def rmst_spec(horizon: float) -> OdeSpec:
    """State ``(S, mu)`` with ``mu_t = int_0^t S_s ds``; column 2 is time."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")

    def F(eta):
        S = eta[0]
        return np.array([[-S, 0.0], [0.0, S]])

    return OdeSpec("rmst", (1.0, 0.0), F, 2, time_columns=(1,), labels=("S", "RMST"))


SPECS = {
    "survival": lambda **kw: survival_spec(),
    "relative_survival": lambda **kw: relative_survival_spec(),
    "cumulative_incidence": lambda **kw: cumulative_incidence_spec(),
    "rmst": lambda horizon=None, **kw: rmst_spec(horizon),
}


def get_spec(name: str, **params) -> OdeSpec:
    try:
        factory = SPECS[name]
    except KeyError:
        raise KeyError(f"unknown transform {name!r}; choose from {sorted(SPECS)}") from None
    return factory(**params)


def bind(spec: OdeSpec, coef: CumCoef, combos) -> list[StepPath]:
    """Integrators as linear combinations of ``coef`` columns.

    ``combos`` has one coefficient vector per hazard column of the spec.  For
    the relative survival of treatment at time 0 against never treated with
    a ``(1, A)`` fit that is ``[[1, 1], [1, 0]]``.
    """
    combos = np.atleast_2d(np.asarray(combos, dtype=float))
    if combos.shape != (spec.n_hazards, coef.p):
        raise ValueError(
            f"spec {spec.name!r} needs {spec.n_hazards} combinations of {coef.p} columns, got shape {combos.shape}"
        )
    return [coef.combine(c) for c in combos]


class PluginEstimator(BaseEstimator):
    """Transform cumulative hazard coefficients into an interpretable parameter.

    Parameters
    ----------
    spec : str
        One of ``survival``, ``relative_survival``, ``cumulative_incidence``, ``rmst``.
    combos : array-like, optional
        Column combinations passed to :func:`bind`; defaults to the identity
        over the first hazard columns.
    horizon : float, optional
        Required for ``rmst``.
    """

    def __init__(self, spec="survival", combos=None, horizon=None):
        self.spec = spec
        self.combos = combos
        self.horizon = horizon

    def fit(self, coef: CumCoef, y=None):
        ode = get_spec(self.spec, horizon=self.horizon)
        combos = self.combos
        if combos is None:
            combos = np.eye(ode.n_hazards, coef.p)
        self.path_ = solve_plugin(ode, bind(ode, coef, combos), self.horizon)
        return self

    def transform(self, times):
        check_is_fitted(self, "path_")
        return self.path_(np.atleast_1d(np.asarray(times, dtype=float)))
